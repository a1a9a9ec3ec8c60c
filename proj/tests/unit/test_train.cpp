#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "cappa/errors.hpp"
#include "cappa/train.hpp"
#include "tiny_setup.hpp"

using namespace cappa;
using namespace cappa::train;
using cappa::testing::tiny_config;
using cappa::testing::tiny_data;
using cappa::testing::tiny_train;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

}  // namespace

TEST(LrSchedule, WarmupThenCosineToZero) {
  TrainConfig c;
  c.steps = 1000;
  c.base_lr = 2e-3;
  c.warmup_steps = 100;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(100, c), 2e-3);
  EXPECT_NEAR(lr_at(550, c), 1e-3, 1e-15);
  EXPECT_NEAR(lr_at(1000, c), 0.0, 1e-12);
  const double x = 0.5 * 2e-3 * (1 + std::cos(std::numbers::pi * 200.0 / 900.0));
  EXPECT_DOUBLE_EQ(lr_at(300, c), x);
  for (std::size_t s = 101; s <= 1000; ++s) EXPECT_LE(lr_at(s, c), lr_at(s - 1, c));
}

TEST(LrSchedule, AutoWarmupIsTwoPercent) {
  TrainConfig c;
  c.steps = 2000;
  EXPECT_EQ(c.effective_warmup(), 40u);
  EXPECT_DOUBLE_EQ(lr_at(40, c), c.base_lr);
  c.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, c), c.base_lr);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  std::vector<double> p{1.5, -2.0}, g{0, 0}, m{0, 0}, v{0, 0};
  adamw_update<double>(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
}

TEST(AdamW, OneStepOnSquareDescends) {
  std::vector<double> p{1.0}, g{2.0}, m{0}, v{0};
  adamw_update<double>(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_LT(std::abs(p[0]), 1.0);
}

TEST(AdamW, ThreeStepsMatchScalarReimplementation) {
  // f(x, y) = 3x^2 + 0.5y^2 + xy
  auto grad = [](double x, double y) { return std::pair{6 * x + y, y + x}; };
  const double lr = 0.05, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  double x = 0.7, y = -1.3, mx = 0, my = 0, vx = 0, vy = 0;
  std::vector<double> p{x, y}, m{0, 0}, v{0, 0};
  for (int t = 1; t <= 3; ++t) {
    const auto [gx, gy] = grad(x, y);
    mx = b1 * mx + (1 - b1) * gx;
    my = b1 * my + (1 - b1) * gy;
    vx = b2 * vx + (1 - b2) * gx * gx;
    vy = b2 * vy + (1 - b2) * gy * gy;
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    x -= lr * ((mx / c1) / (std::sqrt(vx / c2) + eps) + wd * x);
    y -= lr * ((my / c1) / (std::sqrt(vy / c2) + eps) + wd * y);

    const auto [hx, hy] = grad(p[0], p[1]);
    const std::vector<double> g{hx, hy};
    adamw_update<double>(p, g, m, v, static_cast<std::uint64_t>(t), lr, wd);
  }
  EXPECT_NEAR(p[0], x, 1e-7);
  EXPECT_NEAR(p[1], y, 1e-7);
}

TEST(AdamW, RejectsMismatchedShapesAndStepZero) {
  std::vector<double> p{1, 2}, g{1}, m{0, 0}, v{0, 0};
  EXPECT_THROW(adamw_update<double>(p, g, m, v, 1, 0.1, 0.0), ShapeError);
  std::vector<double> g2{1, 1};
  EXPECT_THROW(adamw_update<double>(p, g2, m, v, 0, 0.1, 0.0), ShapeError);
}

TEST(Optimizer, DecayOnlyTouchesFlaggedParams) {
  model::ParamStore ps;
  ps.add("w", Tensor::full({2}, 1.0f, true), true);
  ps.add("ln.scale", Tensor::full({2}, 1.0f, true), false);
  auto st = init_optimizer(ps);
  optimizer_step(ps, st, 0.1, 0.5);
  EXPECT_EQ(st.t, 1u);
  EXPECT_FLOAT_EQ(ps.get("w").data()[0], 1.0f - 0.05f);
  EXPECT_EQ(ps.get("ln.scale").data()[0], 1.0f);
}

TEST(Optimizer, StateMismatchThrows) {
  model::ParamStore ps;
  ps.add("w", Tensor::full({2}, 1.0f, true), true);
  OptimizerState st;
  EXPECT_THROW(optimizer_step(ps, st, 0.1, 0.0), ShapeError);
}

TEST(Freeze, NamesFollowMode) {
  EXPECT_TRUE(is_frozen(FreezeMode::kEncoder, "enc.block0.attn.q.w"));
  EXPECT_FALSE(is_frozen(FreezeMode::kEncoder, "dec.block0.self.q.w"));
  EXPECT_TRUE(is_frozen(FreezeMode::kDecoderExceptXattn, "dec.block0.self.q.w"));
  EXPECT_FALSE(is_frozen(FreezeMode::kDecoderExceptXattn, "dec.block0.xattn.q.w"));
  EXPECT_FALSE(is_frozen(FreezeMode::kDecoderExceptXattn, "enc.pos"));
  EXPECT_TRUE(is_frozen(FreezeMode::kEncoderAndDecoderExceptXattn, "enc.pos"));
  EXPECT_TRUE(is_frozen(FreezeMode::kEncoderAndDecoderExceptXattn, "dec.head.w"));
  EXPECT_FALSE(is_frozen(FreezeMode::kEncoderAndDecoderExceptXattn, "dec.block0.xattn.o.w"));
  EXPECT_FALSE(is_frozen(FreezeMode::kNone, "enc.pos"));
  for (auto m : {FreezeMode::kNone, FreezeMode::kEncoder, FreezeMode::kDecoderExceptXattn,
                 FreezeMode::kEncoderAndDecoderExceptXattn}) {
    EXPECT_EQ(parse_freeze(freeze_name(m)), m);
  }
  EXPECT_FALSE(parse_freeze("half"));
}

class FreezeTraining : public ::testing::TestWithParam<FreezeMode> {};

TEST_P(FreezeTraining, FrozenTensorsStayBitwise) {
  const auto mode = GetParam();
  const auto mcfg = tiny_config(model::Objective::kCap);
  auto tcfg = tiny_train(5);
  tcfg.freeze = mode;
  const auto data = tiny_data(16);
  const auto before = init_state(mcfg, tcfg).params.clone();
  const auto res = train::train(mcfg, tcfg, data);
  std::size_t frozen = 0, moved = 0;
  for (const auto& p : before.entries()) {
    const bool same = same_values(p.value, res.state.params.get(p.name));
    if (is_frozen(mode, p.name)) {
      ++frozen;
      EXPECT_TRUE(same) << p.name;
    } else {
      moved += same ? 0 : 1;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

INSTANTIATE_TEST_SUITE_P(Modes, FreezeTraining,
                         ::testing::Values(FreezeMode::kEncoder, FreezeMode::kDecoderExceptXattn,
                                           FreezeMode::kEncoderAndDecoderExceptXattn));

TEST(Training, DeterministicGivenSeeds) {
  const auto mcfg = tiny_config(model::Objective::kCapPa);
  const auto tcfg = tiny_train(6);
  const auto data = tiny_data(16);
  const auto a = train::train(mcfg, tcfg, data);
  const auto b = train::train(mcfg, tcfg, data);
  EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
  for (const auto& p : a.state.params.entries()) EXPECT_TRUE(same_values(p.value, b.state.params.get(p.name)));
  auto other = tcfg;
  other.seed = 6;
  EXPECT_NE(metrics_csv(train::train(mcfg, other, data).metrics), metrics_csv(a.metrics));
}

TEST(Training, LossDecreasesAndStaysFinite) {
  const auto mcfg = tiny_config(model::Objective::kCap);
  auto tcfg = tiny_train(60);
  tcfg.base_lr = 3e-3;
  const auto res = train::train(mcfg, tcfg, tiny_data(8));
  ASSERT_EQ(res.metrics.size(), 60u);
  for (const auto& r : res.metrics) EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_LT(res.metrics.back().loss, res.metrics.front().loss * 0.7);
  EXPECT_EQ(res.state.step, 60u);
}

TEST(Training, CappaLogsBothBranches) {
  const auto mcfg = tiny_config(model::Objective::kCapPa);
  auto tcfg = tiny_train(20);
  tcfg.batch = 8;
  const auto res = train::train(mcfg, tcfg, tiny_data(16));
  bool causal = false, parallel = false;
  for (const auto& r : res.metrics) {
    causal = causal || std::isfinite(r.loss_causal);
    parallel = parallel || std::isfinite(r.loss_parallel);
  }
  EXPECT_TRUE(causal);
  EXPECT_TRUE(parallel);
}

TEST(Training, ParallelFractionZeroReproducesCapCsv) {
  const auto data = tiny_data(16);
  const auto tcfg = tiny_train(8);
  auto cappa = tiny_config(model::Objective::kCapPa);
  cappa.parallel_fraction = 0.0;
  EXPECT_EQ(metrics_csv(train::train(tiny_config(model::Objective::kCap), tcfg, data).metrics),
            metrics_csv(train::train(cappa, tcfg, data).metrics));
}

TEST(Training, ReinitXattnRedrawsOnlyCrossAttention) {
  const auto mcfg = tiny_config(model::Objective::kCap);
  auto tcfg = tiny_train(1);
  tcfg.freeze = FreezeMode::kEncoderAndDecoderExceptXattn;
  const auto data = tiny_data(4);
  const auto initial = init_state(mcfg, tiny_train(1)).params;
  const auto plain = train::train(mcfg, tcfg, data, initial.clone());
  tcfg.reinit_xattn = true;
  const auto res = train::train(mcfg, tcfg, data, initial.clone());
  for (const auto& p : initial.entries()) {
    const auto& got = res.state.params.get(p.name);
    if (p.name.find(".xattn.") == std::string::npos) {
      EXPECT_TRUE(same_values(p.value, got)) << p.name;
    } else {
      // one small step cannot explain a full redraw
      double far = 0;
      for (std::size_t i = 0; i < got.numel(); ++i)
        far = std::max(far, std::abs(double(got.data()[i]) - plain.state.params.get(p.name).data()[i]));
      EXPECT_GT(far, 0.01) << p.name;
    }
  }
}

TEST(Training, EmptyDataAndBadTargetsThrow) {
  const auto mcfg = tiny_config(model::Objective::kCap);
  auto tcfg = tiny_train(3);
  train::TrainData empty{{}, tok::build_vocab(data::grammar_corpus())};
  EXPECT_THROW(train::train(mcfg, tcfg, empty), ConfigError);
  auto st = init_state(mcfg, tcfg);
  EXPECT_THROW(run_steps(mcfg, tcfg, st, tiny_data(4), 4), ConfigError);
}

TEST(BatchIndices, EachEpochIsAPermutation) {
  const std::size_t n = 10, b = 4;
  std::vector<std::size_t> stream;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto idx = batch_indices(3, s, b, n);
    ASSERT_EQ(idx.size(), b);
    stream.insert(stream.end(), idx.begin(), idx.end());
  }
  for (std::size_t e = 0; e < 4; ++e) {
    std::set<std::size_t> seen(stream.begin() + static_cast<long>(e * n), stream.begin() + static_cast<long>((e + 1) * n));
    EXPECT_EQ(seen.size(), n);
  }
  EXPECT_EQ(batch_indices(3, 7, b, n), batch_indices(3, 7, b, n));
  EXPECT_THROW(batch_indices(3, 0, b, 0), ConfigError);
}

TEST(MetricsCsv, HeaderAndNan) {
  const std::vector<MetricsRow> rows{{0, 0.0, 2.5, 2.5, std::nan("")}, {1, 1e-3, 1.25, std::nan(""), 1.0 / 3}};
  const auto s = metrics_csv(rows);
  EXPECT_EQ(s, "step,lr,loss,loss_causal,loss_parallel\n0,0,2.5,2.5,nan\n1,0.001,1.25,nan,0.333333333\n");
  std::ostringstream o;
  write_metrics_csv(o, rows, false);
  EXPECT_FALSE(starts_with(o.str(), "step"));
}

TEST(TrainConfig, KeyValueRoundTripAndValidation) {
  TrainConfig c;
  EXPECT_TRUE(c.set("steps", "300"));
  EXPECT_TRUE(c.set("freeze", "encoder"));
  EXPECT_TRUE(c.set("blind", "true"));
  EXPECT_FALSE(c.set("nonsense", "1"));
  EXPECT_THROW(c.set("steps", "-3"), ConfigError);
  EXPECT_THROW(c.set("base_lr", "fast"), ConfigError);
  TrainConfig d;
  for (const auto& [k, v] : c.to_kv()) EXPECT_TRUE(d.set(k, v)) << k;
  EXPECT_EQ(d.steps, 300u);
  EXPECT_EQ(d.freeze, FreezeMode::kEncoder);
  EXPECT_TRUE(d.blind);
  EXPECT_EQ(d.effective_warmup(), c.effective_warmup());
  TrainConfig bad;
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
