#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "cappa/errors.hpp"
#include "cappa/objective.hpp"
#include "cappa/rng.hpp"
#include "cappa/train.hpp"

namespace cappa::train {
namespace {

constexpr std::uint64_t kXattnReinitKey = 0x78617474;

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

template <typename U>
U parse_uint(std::string_view key, std::string_view v) {
  U out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(out)) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + s + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(std::string(key) + ": expected true/false, got '" + std::string(v) + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {stream::kBatchOrder, epoch}));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<std::uint8_t> trainable_mask(const model::ParamStore& params, FreezeMode mode) {
  std::vector<std::uint8_t> mask;
  for (const auto& p : params.entries()) mask.push_back(is_frozen(mode, p.name) ? 0 : 1);
  return mask;
}

bool encoder_frozen(const model::ParamStore& params, std::span<const std::uint8_t> mask) {
  const auto& e = params.entries();
  bool any = false;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!starts_with(e[i].name, "enc.")) continue;
    any = true;
    if (mask[i]) return false;
  }
  return any;
}

}  // namespace

std::string_view freeze_name(FreezeMode m) {
  switch (m) {
    case FreezeMode::kNone: return "none";
    case FreezeMode::kEncoder: return "encoder";
    case FreezeMode::kDecoderExceptXattn: return "decoder_except_xattn";
    case FreezeMode::kEncoderAndDecoderExceptXattn: return "encoder_and_decoder_except_xattn";
  }
  return "?";
}

std::optional<FreezeMode> parse_freeze(std::string_view name) {
  for (auto m : {FreezeMode::kNone, FreezeMode::kEncoder, FreezeMode::kDecoderExceptXattn,
                 FreezeMode::kEncoderAndDecoderExceptXattn}) {
    if (freeze_name(m) == name) return m;
  }
  return std::nullopt;
}

bool is_frozen(FreezeMode mode, std::string_view name) {
  const bool enc = starts_with(name, "enc.");
  const bool dec_non_xattn = starts_with(name, "dec.") && name.find(".xattn.") == std::string_view::npos;
  switch (mode) {
    case FreezeMode::kNone: return false;
    case FreezeMode::kEncoder: return enc;
    case FreezeMode::kDecoderExceptXattn: return dec_non_xattn;
    case FreezeMode::kEncoderAndDecoderExceptXattn: return enc || dec_non_xattn;
  }
  return false;
}

std::size_t TrainConfig::effective_warmup() const {
  return warmup_steps == kAutoWarmup ? steps * 2 / 100 : warmup_steps;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (steps == 0) fail("steps must be positive");
  if (batch == 0) fail("batch must be at least 1");
  if (effective_warmup() >= steps) {
    fail("warmup_steps " + std::to_string(effective_warmup()) + " must be below steps " + std::to_string(steps));
  }
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(clip_norm >= 0)) fail("clip_norm must be non-negative");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  auto b = [](bool f) { return std::string(f ? "true" : "false"); };
  return {
      {"steps", std::to_string(steps)},
      {"batch", std::to_string(batch)},
      {"base_lr", fmt(base_lr)},
      {"weight_decay", fmt(weight_decay)},
      {"warmup_steps", std::to_string(effective_warmup())},
      {"seed", std::to_string(seed)},
      {"freeze", std::string(freeze_name(freeze))},
      {"reinit_xattn", b(reinit_xattn)},
      {"clip_norm", fmt(clip_norm)},
      {"blind", b(blind)},
  };
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  if (key == "steps") {
    steps = parse_uint<std::size_t>(key, value);
  } else if (key == "batch") {
    batch = parse_uint<std::size_t>(key, value);
  } else if (key == "base_lr") {
    base_lr = parse_double(key, value);
  } else if (key == "weight_decay") {
    weight_decay = parse_double(key, value);
  } else if (key == "warmup_steps") {
    warmup_steps = value == "auto" ? kAutoWarmup : parse_uint<std::size_t>(key, value);
  } else if (key == "seed") {
    seed = parse_uint<std::uint64_t>(key, value);
  } else if (key == "freeze") {
    auto m = parse_freeze(value);
    if (!m) {
      throw ConfigError("freeze: expected none, encoder, decoder_except_xattn or encoder_and_decoder_except_xattn, got '" +
                        std::string(value) + "'");
    }
    freeze = *m;
  } else if (key == "reinit_xattn") {
    reinit_xattn = parse_bool(key, value);
  } else if (key == "clip_norm") {
    clip_norm = parse_double(key, value);
  } else if (key == "blind") {
    blind = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows, bool header) {
  if (header) out << "step,lr,loss,loss_causal,loss_parallel\n";
  for (const auto& r : rows) {
    out << r.step << ',' << fmt_metric(r.lr) << ',' << fmt_metric(r.loss) << ',' << fmt_metric(r.loss_causal) << ','
        << fmt_metric(r.loss_parallel) << '\n';
  }
}

std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::ostringstream ss;
  write_metrics_csv(ss, rows);
  return ss.str();
}

TrainState init_state(const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
  TrainState st;
  st.params = model::init_params(mcfg, derive_seed(tcfg.seed, {stream::kInit}));
  st.opt = init_optimizer(st.params);
  return st;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t batch, std::size_t count) {
  if (count == 0) throw ConfigError("training data is empty");
  std::vector<std::size_t> out;
  out.reserve(batch);
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::uint64_t g = step * batch + i;
    const std::uint64_t epoch = g / count;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(seed, epoch, count);
      cached_epoch = epoch;
    }
    out.push_back(perm[g % count]);
  }
  return out;
}

std::vector<MetricsRow> run_steps(const model::ModelConfig& mcfg, const TrainConfig& tcfg, TrainState& state,
                                  const TrainData& data, std::optional<std::uint64_t> until,
                                  const StepCallback& on_step) {
  mcfg.validate();
  tcfg.validate();
  if (data.examples.empty()) throw ConfigError("training data is empty");
  const std::uint64_t end = until.value_or(tcfg.steps);
  if (end > tcfg.steps) throw ConfigError("run_steps: target step beyond configured steps");
  if (state.opt.m.size() != state.params.entries().size()) state.opt = init_optimizer(state.params);

  const auto mask = trainable_mask(state.params, tcfg.freeze);
  objective::LossOptions opts;
  opts.blind = tcfg.blind;
  opts.frozen_encoder = encoder_frozen(state.params, mask);

  std::vector<MetricsRow> rows;
  for (std::uint64_t step = state.step; step < end; ++step) {
    const auto idx = batch_indices(tcfg.seed, step, tcfg.batch, data.examples.size());
    const auto batch = objective::make_batch(data.examples, idx, data.vocab, mcfg.max_len);
    state.params.zero_grad();
    MetricsRow row{step, lr_at(step, tcfg), 0.0, std::nan(""), std::nan("")};
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor loss;
      if (mcfg.is_captioner()) {
        auto r = objective::caption_loss(mcfg, state.params, batch, {tcfg.seed, step}, opts);
        loss = r.loss;
        row.loss_causal = r.loss_causal;
        row.loss_parallel = r.loss_parallel;
      } else {
        loss = objective::clip_loss(mcfg, state.params, batch, opts);
      }
      row.loss = loss.item();
      if (!std::isfinite(row.loss)) throw Error("training diverged: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
    }
    const double norm = global_grad_norm(state.params, mask);
    const double gscale = tcfg.clip_norm > 0 && norm > tcfg.clip_norm ? tcfg.clip_norm / norm : 1.0;
    optimizer_step(state.params, state.opt, row.lr, tcfg.weight_decay, mask, gscale);
    state.params.zero_grad();
    state.step = step + 1;
    rows.push_back(row);
    if (on_step) on_step(row);
  }
  return rows;
}

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const TrainData& data,
                  std::optional<model::ParamStore> initial, const StepCallback& on_step) {
  mcfg.validate();
  tcfg.validate();
  TrainResult res;
  if (initial) {
    res.state.params = std::move(*initial);
    for (auto& p : res.state.params.entries()) p.value.set_requires_grad(true);
    res.state.opt = init_optimizer(res.state.params);
  } else {
    res.state = init_state(mcfg, tcfg);
  }
  if (tcfg.reinit_xattn) {
    if (!mcfg.is_captioner()) throw ConfigError("reinit_xattn requires a captioning objective");
    model::reinit_cross_attention(res.state.params, mcfg, derive_seed(tcfg.seed, {stream::kInit, kXattnReinitKey}));
  }
  res.metrics = run_steps(mcfg, tcfg, res.state, data, std::nullopt, on_step);
  return res;
}

}  // namespace cappa::train
