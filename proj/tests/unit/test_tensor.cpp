#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cappa/tensor.hpp"
#include "grad_suite.hpp"

using namespace cappa;
using cappa::testing::random_tensor;

namespace {

std::vector<double> vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(GradCheck, EveryOpTwentyInstances) {
  std::uint64_t seed = 100;
  for (const auto& op : cappa::testing::grad_ops()) {
    const auto s = cappa::testing::run_grad_op(op, 20, seed++);
    EXPECT_LE(s.worst, 1e-4) << op.name << ": " << s.detail;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // clone() cuts the graph, so the tape sees d(x*c)/dx = c while the true
  // derivative of x^2 is 2x.
  std::mt19937_64 rng(11);
  const auto r = cappa::testing::grad_check([](const auto& x) { return mul(x[0], x[0].clone()); },
                                            {random_tensor(rng, {3, 3}, 0.5, 1.0)}, rng);
  EXPECT_GT(r.max_rel_err, 0.1);
}

TEST(Matmul, MatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor(rng, {2, 3, 4});
  const auto b = random_tensor(rng, {2, 4, 5});
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.data()[(g * 3 + i) * 4 + k] * b.data()[(g * 4 + k) * 5 + j];
        EXPECT_NEAR(c.data()[(g * 3 + i) * 5 + j], s, 1e-12);
      }
}

TEST(Matmul, RejectsInnerMismatch) {
  EXPECT_THROW(matmul(TensorD::zeros({2, 3}), TensorD::zeros({4, 2})), ShapeError);
}

TEST(Add, RejectsNonSuffixBroadcast) {
  EXPECT_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({2})), ShapeError);
  EXPECT_NO_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({3})));
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor(rng, {3, 8}, -5, 5);
  const auto y = layer_norm(x, TensorD::full({8}, 1.0));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t d = 0; d < 8; ++d) m += y.data()[r * 8 + d];
    m /= 8;
    for (std::size_t d = 0; d < 8; ++d) v += (y.data()[r * 8 + d] - m) * (y.data()[r * 8 + d] - m);
    v /= 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Gelu, TanhApproximationValues) {
  const TensorD x({4}, {-2.0, -0.5, 0.0, 1.5});
  const auto y = gelu(x);
  for (std::size_t i = 0; i < 4; ++i) {
    const double v = x.data()[i];
    const double ref = 0.5 * v * (1 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y.data()[i], ref, 1e-12);
  }
  EXPECT_NEAR(y.data()[3], 1.3995715764, 1e-8);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor(rng, {4, 7}, -10, 10);
  const auto y = softmax(x);
  const auto y2 = softmax(add(x, TensorD::full({7}, 100.0)));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += y.data()[r * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], y2.data()[i], 1e-12);
}

TEST(CrossEntropy, HandComputedValue) {
  // Row 0: logits (0, ln 3) -> p(target 1) = 3/4. Row 1 is weighted out.
  const TensorD logits({2, 2}, {0.0, std::log(3.0), 5.0, -5.0});
  const std::vector<std::int32_t> t{1, 1};
  const std::vector<double> w{1.0, 0.0};
  EXPECT_NEAR(cross_entropy(logits, t, std::span<const double>(w)).item(), -std::log(0.75), 1e-12);
}

TEST(CrossEntropy, AllWeightsZeroThrows) {
  const std::vector<std::int32_t> t{0};
  const std::vector<double> w{0.0};
  EXPECT_THROW(cross_entropy(TensorD::zeros({1, 3}), t, std::span<const double>(w)), EmptyLossError);
}

TEST(Attention, MaskedKeysGetNoWeight) {
  std::mt19937_64 rng(4);
  const auto q = random_tensor(rng, {1, 3, 2});
  const auto k = random_tensor(rng, {1, 3, 2});
  const auto v = random_tensor(rng, {1, 3, 2});
  const auto masked = attention(q, k, v, cappa::testing::causal_mask(3));
  // Query 0 can only see key 0, so its output is exactly v[0].
  EXPECT_DOUBLE_EQ(masked.data()[0], v.data()[0]);
  EXPECT_DOUBLE_EQ(masked.data()[1], v.data()[1]);
}

TEST(Attention, PerEntryMaskBroadcastsOverHeads) {
  std::mt19937_64 rng(5);
  const auto q = random_tensor(rng, {2, 2, 3, 2});
  const auto k = random_tensor(rng, {2, 2, 3, 2});
  const auto v = random_tensor(rng, {2, 2, 3, 2});
  std::vector<double> m(2 * 9, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) m[9 + i * 3 + j] = kMaskedOut;  // second example causal
  const auto out = attention(q, k, v, TensorD({2, 3, 3}, m));
  const auto open = attention(q, k, v);
  const auto causal = attention(q, k, v, cappa::testing::causal_mask(3));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out.data()[i], open.data()[i]);
  for (std::size_t i = 12; i < 24; ++i) EXPECT_EQ(out.data()[i], causal.data()[i]);
}

TEST(Embedding, RepeatedIdsAccumulateGradient) {
  TensorD table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::int32_t> ids{2, 2, 0};
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(embedding(table, ids, Shape{3})));
  }
  EXPECT_EQ(vec(TensorD({3, 2}, {table.grad().begin(), table.grad().end()})),
            (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

TEST(Embedding, OutOfRangeIdThrows) {
  const std::vector<std::int32_t> ids{3};
  EXPECT_THROW(embedding(TensorD::zeros({3, 2}), ids, Shape{1}), ShapeError);
}

TEST(Transpose, IsAnInvolution) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor(rng, {2, 3, 4});
  const auto t = transpose(x, 0, 2);
  EXPECT_EQ(t.shape(), (Shape{4, 3, 2}));
  EXPECT_EQ(vec(transpose(t, 0, 2)), vec(x));
  EXPECT_EQ(t.data()[(3 * 3 + 1) * 2 + 1], x.data()[(1 * 3 + 1) * 4 + 3]);
}

TEST(SliceConcat, RoundTrip) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor(rng, {2, 5, 3});
  const auto joined = concat(std::vector<TensorD>{slice(x, 1, 0, 2), slice(x, 1, 2, 3)}, 1);
  EXPECT_EQ(vec(joined), vec(x));
  EXPECT_THROW(slice(x, 1, 4, 2), ShapeError);
}

TEST(MeanAxis, RemovesTheAxis) {
  const TensorD x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(vec(mean_axis(x, 0)), (std::vector<double>{2.5, 3.5, 4.5}));
  EXPECT_EQ(vec(mean_axis(x, -1)), (std::vector<double>{2, 5}));
}

TEST(L2Normalize, UnitRows) {
  const auto y = l2_normalize(TensorD({2, 2}, {3, 4, 0, 2}));
  const std::vector<double> want{0.6, 0.8, 0, 1};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], want[i], 1e-12);
}

TEST(Dropout, DeterministicInSeedAndUnbiased) {
  const auto x = TensorD::full({10000}, 1.0);
  const auto a = dropout(x, 0.3, 9);
  const auto b = dropout(x, 0.3, 9);
  EXPECT_EQ(vec(a), vec(b));
  double s = 0;
  for (double v : a.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1 / 0.7) < 1e-12);
    s += v;
  }
  EXPECT_NEAR(s / 10000, 1.0, 0.05);
  EXPECT_EQ(vec(dropout(x, 0.0, 9)), vec(x));
}

TEST(Tape, RecordsNothingWithoutActiveTapeOrGradInputs) {
  TensorD a({2}, {1, 2}, true);
  const auto b = TensorD({2}, {3, 4});
  Tape<double> tape;
  (void)add(a, b);
  EXPECT_EQ(tape.size(), 0u);
  {
    TapeScope<double> scope(tape);
    (void)add(b, b);
    EXPECT_EQ(tape.size(), 0u);
    (void)add(a, b);
    EXPECT_EQ(tape.size(), 1u);
    NoGradScope<double> ng;
    (void)add(a, b);
    EXPECT_EQ(tape.size(), 1u);
  }
}

TEST(Tape, SharedSubexpressionGradientsAccumulate) {
  TensorD x({1}, {3.0}, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const auto y = mul(x, x);
    tape.backward(sum(add(y, x)));  // d/dx (x^2 + x) = 7
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tape, NonScalarLossThrows) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(TensorD::zeros({2})), ShapeError);
}

TEST(Cast, FloatDoubleRoundTrip) {
  const Tensor f({3}, {1.5f, -2.25f, 0.1f});
  const auto d = cast<double>(f);
  EXPECT_EQ(cast<float>(d).data()[2], 0.1f);
}
