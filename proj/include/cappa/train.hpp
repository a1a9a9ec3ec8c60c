#pragma once

// Optimizer, learning-rate schedule, training loop and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cappa/datagen.hpp"
#include "cappa/model.hpp"
#include "cappa/tok.hpp"

namespace cappa::train {

enum class FreezeMode { kNone, kEncoder, kDecoderExceptXattn, kEncoderAndDecoderExceptXattn };

std::string_view freeze_name(FreezeMode m);
std::optional<FreezeMode> parse_freeze(std::string_view name);

/// Whether `name` is frozen under `mode`.
bool is_frozen(FreezeMode mode, std::string_view name);

inline constexpr std::size_t kAutoWarmup = std::numeric_limits<std::size_t>::max();

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 64;
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  /// kAutoWarmup means 2% of `steps`.
  std::size_t warmup_steps = kAutoWarmup;
  std::uint64_t seed = 0;
  FreezeMode freeze = FreezeMode::kNone;
  bool reinit_xattn = false;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 1.0;
  /// Train on zeroed encoder outputs (language-only captioner).
  bool blind = false;

  std::size_t effective_warmup() const;
  void validate() const;
  /// Every field with defaults materialized (warmup resolved).
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  bool set(std::string_view key, std::string_view value);

  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup 0 -> base_lr over the warmup steps, then cosine decay to 0
/// at `steps`.
double lr_at(std::size_t step, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with bias correction and decoupled weight decay.

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One element-wise update of `p` in place. `t` is the 1-based step count.
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::uint64_t t, double lr,
                  double wd, const AdamHyper& hyper = {}, double grad_scale = 1.0);

struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  bool operator==(const OptimizerState&) const = default;
};

/// Zero moments matching the parameter table.
OptimizerState init_optimizer(const model::ParamStore& params);

/// Applies one update to every trainable parameter using its accumulated
/// gradient (missing gradients count as zero). Weight decay only touches
/// parameters flagged for decay. `trainable` may be empty (all trainable).
void optimizer_step(model::ParamStore& params, OptimizerState& state, double lr, double wd,
                    std::span<const std::uint8_t> trainable = {}, double grad_scale = 1.0,
                    const AdamHyper& hyper = {});

/// Global L2 norm of the gradients of the trainable parameters.
double global_grad_norm(const model::ParamStore& params, std::span<const std::uint8_t> trainable = {});

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::uint64_t step;
  double lr;
  double loss;
  double loss_causal;
  double loss_parallel;
};

/// Header plus one line per row: step,lr,loss,loss_causal,loss_parallel.
void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows, bool header = true);
std::string metrics_csv(std::span<const MetricsRow> rows);

/// Pre-encoded training corpus.
struct TrainData {
  std::vector<data::Example> examples;
  tok::Vocab vocab;
};

struct TrainState {
  model::ParamStore params;
  OptimizerState opt;
  std::uint64_t step = 0;
};

/// Parameters drawn from the init stream of tcfg.seed, fresh optimizer.
TrainState init_state(const model::ModelConfig& mcfg, const TrainConfig& tcfg);

/// Example indices of the batch at `step`: consecutive slices of a stream of
/// per-epoch permutations keyed by (seed, epoch).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t batch, std::size_t count);

using StepCallback = std::function<void(const MetricsRow&)>;

/// Runs steps state.step .. until-1 (until defaults to tcfg.steps). Applies
/// freeze_mode by skipping updates of frozen tensors. Throws Error if the
/// loss becomes non-finite.
std::vector<MetricsRow> run_steps(const model::ModelConfig& mcfg, const TrainConfig& tcfg, TrainState& state,
                                  const TrainData& data, std::optional<std::uint64_t> until = std::nullopt,
                                  const StepCallback& on_step = {});

struct TrainResult {
  TrainState state;
  std::vector<MetricsRow> metrics;
};

/// Full run. `initial` replaces the fresh initialization (e.g. a pretrained
/// model); reinit_xattn then re-draws the cross-attention weights.
TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const TrainData& data,
                  std::optional<model::ParamStore> initial = std::nullopt, const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// "CAPC" checkpoints: magic, version u32, config block (UTF-8 key=value
// lines), vocabulary block, tensor table (name, decay flag, shape, f32 data),
// optimizer moments, RNG seed, step. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  model::ModelConfig model;
  TrainConfig train;
  tok::Vocab vocab;
  model::ParamStore params;
  OptimizerState opt;
  std::uint64_t rng_seed = 0;
  std::uint64_t step = 0;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// IoError when the file cannot be read; FormatError/VersionError on bad content.
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const tok::Vocab& vocab,
                           const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cappa::train
