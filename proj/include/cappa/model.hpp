#pragma once

// Encoder/decoder architectures.
//
// Image encoder: ViT with a linear patch embedding, learned positional
// embeddings and pre-norm transformer blocks. Attention, MLP and LayerNorm
// carry no biases; the MLP uses GELU. The captioning decoder has the same
// width/heads/MLP size, cross-attends to the final-norm encoder output and
// switches between a causal self-attention mask (autoregressive mode) and no
// mask (parallel mode). The contrastive model adds a text tower of the same
// size as the image tower and GAP-pooled projections on both sides.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cappa/tensor.hpp"
#include "cappa/tok.hpp"

namespace cappa::model {

enum class Objective { kCap, kCapPa, kClip };

std::string_view objective_name(Objective o);
std::optional<Objective> parse_objective(std::string_view name);

/// Default fraction of examples trained in parallel mode for CapPa.
inline constexpr double kDefaultParallelFraction = 0.75;

struct ModelConfig {
  std::size_t patch_size = 4;
  std::size_t image_res = 32;
  std::size_t width = 128;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_dim = 512;
  std::size_t vocab = 18;
  std::size_t max_len = 16;
  Objective objective = Objective::kCap;
  double parallel_fraction = 0.0;
  bool share_dec_embeddings = false;
  bool dec_biases = false;
  double reverse_prob = 0.0;
  /// Draw the prediction mode once per batch instead of once per example.
  bool batch_level_mixing = false;

  std::size_t num_patches() const { return (image_res / patch_size) * (image_res / patch_size); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t head_dim() const { return width / heads; }
  bool is_captioner() const { return objective != Objective::kClip; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// key=value rendering of every field, in a fixed order.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  /// Returns false for unknown keys; throws ConfigError for malformed values.
  bool set(std::string_view key, std::string_view value);

  bool operator==(const ModelConfig&) const = default;
};

/// Desk-scale defaults for an objective (parallel fraction 0.75 for CapPa).
ModelConfig desk_config(Objective objective, std::size_t vocab);

/// ViT-B/16 captioner at 224px with a 32k vocabulary and 64 tokens.
ModelConfig b16_cap_config();

// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Tensor value;
  bool decay = true;
};

/// Named parameter table in insertion order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor value, bool decay);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  /// Undefined tensor when absent.
  Tensor find(std::string_view name) const;

  std::vector<Param>& entries() noexcept { return entries_; }
  const std::vector<Param>& entries() const noexcept { return entries_; }
  std::size_t total_size() const;

  /// Deep copy; the copies keep their requires_grad flags.
  ParamStore clone() const;
  void zero_grad();

 private:
  std::vector<Param> entries_;
};

/// Truncated normal (std 0.02, cut at two std) for matrices and embeddings,
/// ones for norm scales, zeros for biases. Each tensor's stream is keyed by
/// (seed, name), so the result does not depend on creation order.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Fresh MAP head parameters under `prefix` (e.g. "map.").
void init_map_head(ParamStore& store, const std::string& prefix, std::size_t width, std::uint64_t seed);

/// Draws new values for the decoder cross-attention projections.
void reinit_cross_attention(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed);

/// Exact learned-parameter count from a per-layer formula.
std::size_t count_params(const ModelConfig& cfg);

// ---------------------------------------------------------------------------

/// [3,R,R] -> [M, 3*p*p]; row i is patch i in row-major order, flattened as
/// (channel, dy, dx).
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& patches, std::size_t patch, std::size_t resolution);

/// Batched [B,3,R,R] -> [B,M,3*p*p].
Tensor patchify_batch(const Tensor& images, std::size_t patch);

struct EncoderOut {
  Tensor seq;  // [M,D] for one image, [B,M,D] batched
};

EncoderOut encode_image(const ModelConfig& cfg, const ParamStore& params, const Tensor& image);
/// images: [B,3,R,R] -> [B,M,D].
Tensor encode_images(const ModelConfig& cfg, const ParamStore& params, const Tensor& images);

enum class DecodeMode { kCausal, kParallel };

/// Additive self-attention mask for a batch with per-example modes: undefined
/// when every example is parallel, [L,L] lower-triangular when every example
/// is causal, [B,L,L] otherwise.
Tensor self_attention_mask(std::span<const DecodeMode> modes, std::size_t length);

/// enc: [B,M,D]; ids: B*L decoder inputs; returns logits [B,L,V]. L may be
/// shorter than max_len (positional embeddings are truncated).
Tensor decode_batch(const ModelConfig& cfg, const ParamStore& params, const Tensor& enc,
                    std::span<const std::int32_t> ids, std::size_t length, const Tensor& self_mask);

/// Single-sequence decode -> [N,V].
Tensor decode_text(const ModelConfig& cfg, const ParamStore& params, const EncoderOut& enc, const tok::TokenSeq& inputs,
                   DecodeMode mode);

/// Contrastive text tower: transformer over tokens with PAD keys masked, GAP
/// over valid positions, linear projection. ids/valid hold B*N entries;
/// returns [B,D] (not normalized).
Tensor encode_text_tower(const ModelConfig& cfg, const ParamStore& params, std::span<const std::int32_t> ids,
                         std::span<const std::uint8_t> valid, std::size_t length, const std::string& prefix = "txt.");
Tensor encode_text_tower(const ModelConfig& cfg, const ParamStore& params, const tok::TokenSeq& seq);

/// Contrastive image embedding: GAP of the encoder output, then projection.
Tensor image_embedding(const ModelConfig& cfg, const ParamStore& params, const Tensor& enc);

/// Mean over the token axis: [M,D] -> [D], [B,M,D] -> [B,D].
Tensor pool_gap(const Tensor& enc);

template <typename T>
struct MapHead {
  BasicTensor<T> query;  // [1,D]
  BasicTensor<T> wq, wk, wv, wo;
  BasicTensor<T> proj;  // [D,D]
  std::size_t heads = 1;
};

MapHead<float> map_head_view(const ParamStore& store, const std::string& prefix, std::size_t heads);

/// Single learned query attending over the sequence, then a projection.
/// enc: [M,D] -> [D] or [B,M,D] -> [B,D].
template <typename T>
BasicTensor<T> pool_map(const MapHead<T>& head, const BasicTensor<T>& enc);

/// Bias-free multi-head attention, exposed for tests and the heads above.
/// xq: [B,N,D], xkv: [B,M,D].
template <typename T>
BasicTensor<T> multihead_attention(const BasicTensor<T>& xq, const BasicTensor<T>& xkv, const BasicTensor<T>& wq,
                                   const BasicTensor<T>& wk, const BasicTensor<T>& wv, const BasicTensor<T>& wo,
                                   std::size_t heads, const BasicTensor<T>& mask);

}  // namespace cappa::model
