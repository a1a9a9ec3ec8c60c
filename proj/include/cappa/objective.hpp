#pragma once

// Training losses and log-likelihood scoring.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cappa/datagen.hpp"
#include "cappa/model.hpp"
#include "cappa/tensor.hpp"
#include "cappa/tok.hpp"

namespace cappa::objective {

struct Batch {
  Tensor images;  // [B,3,R,R]
  std::vector<tok::TokenSeq> captions;  // each of length max_len

  std::size_t size() const noexcept { return captions.size(); }
};

/// Gathers examples[indices] into a batch; captions are encoded with `vocab`.
Batch make_batch(std::span<const data::Example> examples, std::span<const std::size_t> indices,
                 const tok::Vocab& vocab, std::size_t max_len);

/// Stacks [3,R,R] images into [B,3,R,R].
Tensor stack_images(std::span<const Tensor> images);

/// Source of per-example random draws: every draw is keyed by
/// (seed, step, example index), independent of call order.
struct DrawKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

struct LossOptions {
  /// Replace the encoder output by zeros (language-only training).
  bool blind = false;
  /// Run the encoder without recording gradients.
  bool frozen_encoder = false;
};

struct CaptionLoss {
  Tensor loss;  // scalar, mean CE over valid targets of the whole batch
  /// Mean CE over the valid targets of causal / parallel examples only; NaN
  /// when the batch holds no example of that kind.
  double loss_causal;
  double loss_parallel;
  std::vector<model::DecodeMode> modes;
  /// Whether any self-attention mask was applied.
  bool causal_mask_applied;
};

/// Whether example `index` is trained in parallel mode at this key.
bool draws_parallel(const model::ModelConfig& cfg, const DrawKey& key, std::size_t index);
/// Whether example `index` has its caption reversed at this key.
bool draws_reverse(const model::ModelConfig& cfg, const DrawKey& key, std::size_t index);

/// Teacher-forced next-token loss. Causal examples read [BOS, t1..t_{n-1}]
/// and predict [t1..t_n, EOS]; parallel examples read all MASK tokens and
/// predict the same targets without a self-attention mask. Throws
/// EmptyLossError when no target is valid.
CaptionLoss caption_loss(const model::ModelConfig& cfg, const model::ParamStore& params, const Batch& batch,
                         const DrawKey& key, const LossOptions& options = {});

/// Symmetric InfoNCE: both sides L2-normalized, S = img txt^T exp(-log_temp),
/// mean of the row-wise and column-wise cross-entropies against the
/// diagonal. Throws BatchTooSmall for B < 2.
Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& log_temp);
Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double temperature);

/// Contrastive loss of the dual-tower model on a batch.
Tensor clip_loss(const model::ModelConfig& cfg, const model::ParamStore& params, const Batch& batch,
                 const LossOptions& options = {});

// ---------------------------------------------------------------------------
// Scoring

/// Sum over valid targets of log p(target) for each sequence, from one decoder
/// pass per batch of candidates against the same encoder output [M,D].
std::vector<double> score_sequences(const model::ModelConfig& cfg, const model::ParamStore& params,
                                    const model::EncoderOut& enc, std::span<const tok::TokenSeq> seqs,
                                    model::DecodeMode mode);

/// Causal score computed one token at a time: the decoder is rerun on the
/// growing prefix (PAD-filled to max_len) and only position t is read.
double score_stepwise(const model::ModelConfig& cfg, const model::ParamStore& params, const model::EncoderOut& enc,
                      const tok::TokenSeq& seq);

/// Log-likelihood of `caption` given `image`. OOVError propagates from encode.
double score_caption(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                     const Tensor& image, const std::string& caption, model::DecodeMode mode);

std::vector<double> score_captions(const model::ModelConfig& cfg, const model::ParamStore& params,
                                   const tok::Vocab& vocab, const Tensor& image,
                                   std::span<const std::string> captions, model::DecodeMode mode);

/// score_captions with the encoder output replaced by zeros.
std::vector<double> blind_scores(const model::ModelConfig& cfg, const model::ParamStore& params,
                                 const tok::Vocab& vocab, std::span<const std::string> captions,
                                 model::DecodeMode mode = model::DecodeMode::kCausal);
double blind_score(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                   const std::string& caption, model::DecodeMode mode = model::DecodeMode::kCausal);

/// Cosine similarity between the image and each caption under the dual-tower
/// model.
std::vector<double> contrastive_scores(const model::ModelConfig& cfg, const model::ParamStore& params,
                                       const tok::Vocab& vocab, const Tensor& image,
                                       std::span<const std::string> captions);

/// Index of the highest value; ties go to the lowest index.
std::size_t argmax_first(std::span<const double> values);

/// Argmax of score_caption over the candidates (at least two).
std::size_t zero_shot_classify(const model::ModelConfig& cfg, const model::ParamStore& params,
                               const tok::Vocab& vocab, const Tensor& image,
                               std::span<const std::string> class_captions,
                               model::DecodeMode mode = model::DecodeMode::kCausal);

/// Cosine-similarity analog for the contrastive objective.
std::size_t zero_shot_classify_contrastive(const model::ModelConfig& cfg, const model::ParamStore& params,
                                           const tok::Vocab& vocab, const Tensor& image,
                                           std::span<const std::string> class_captions);

}  // namespace cappa::objective
