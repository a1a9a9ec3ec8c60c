#pragma once

// Evaluation protocols over frozen representations: k-shot probes, text-tower
// alignment, fresh-decoder transfer, retrieval and the perturbation benchmark.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cappa/datagen.hpp"
#include "cappa/model.hpp"
#include "cappa/tensor.hpp"
#include "cappa/tok.hpp"

namespace cappa::eval {

// ---------------------------------------------------------------------------
// Features

enum class FeatureMode { kGap, kPrelogits };

std::string_view feature_mode_name(FeatureMode m);
std::optional<FeatureMode> parse_feature_mode(std::string_view name);

/// Frozen forward over images [K,3,R,R] in chunks; returns [K,D]. kGap pools
/// the encoder sequence; kPrelogits is the contrastive image projection
/// before normalization (clip objective only).
Tensor extract_features(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& images,
                        FeatureMode mode);

/// Frozen encoder sequences [K,M,D].
Tensor extract_sequences(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& images);

/// Stacked images of the examples, [K,3,R,R].
Tensor images_of(std::span<const data::Example> examples);

/// Class id of the first object (row-major cell order) of each example.
std::vector<int> first_object_labels(std::span<const data::Example> examples);

// ---------------------------------------------------------------------------
// k-shot probes

enum class ProbeKind { kLinear, kMlp, kMap };

std::string_view probe_kind_name(ProbeKind k);
std::optional<ProbeKind> parse_probe_kind(std::string_view name);

struct ProbeResult {
  double accuracy = 0;
  std::vector<double> per_class;  // NaN for classes absent from the eval split
  ProbeKind kind = ProbeKind::kLinear;
  std::size_t shots = 0;  // 0 means every available training example
  double lr = 0;          // selected by the sweep (last seed)
  double weight_decay = 0;
};

struct ProbeOptions {
  std::size_t num_classes = data::kNumClasses;
  std::size_t steps = 200;
  std::vector<double> lrs = {1e-2, 3e-3};
  std::vector<double> wds = {1e-4, 1e-2};
  std::size_t seeds = 3;
  /// Validation examples per class carved out for the sweep.
  std::size_t val_per_class = 2;
  std::size_t map_heads = 4;
  std::size_t mlp_hidden = 0;  // 0: same as the feature width
};

/// Splits each class into k train, val_per_class validation and the rest for
/// evaluation (disjoint), trains the head on frozen features and reports the
/// mean over `options.seeds` seeds. features: [K,D] for linear/mlp probes,
/// [K,M,D] for the MAP probe. Throws InsufficientShots when a class has fewer
/// than k examples or nothing remains for evaluation.
ProbeResult kshot_probe(const Tensor& features, std::span<const int> labels, std::size_t k, ProbeKind kind,
                        std::uint64_t seed, const ProbeOptions& options = {});

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
  double image_to_text = 0;
  double text_to_image = 0;
};

/// Cosine nearest neighbour; pair i is correct iff its similarity is strictly
/// larger than every competitor (ties count as failures).
RetrievalResult retrieval_eval(const Tensor& image_emb, const Tensor& text_emb);

// ---------------------------------------------------------------------------
// Text-tower alignment against a frozen image encoder

struct LitOptions {
  std::size_t steps = 300;
  std::size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t map_heads = 4;
};

struct LitModel {
  model::ModelConfig cfg;       // clip-shaped config for the text tower
  model::ParamStore params;     // txt.*, map.*, clip.log_temp
  std::size_t map_heads = 4;
  std::vector<double> losses;   // per step
};

/// Trains a fresh text tower and MAP head contrastively; only those receive
/// updates, the encoder parameters are read but never written.
LitModel lit_align(const model::ModelConfig& image_cfg, const model::ParamStore& frozen,
                   std::span<const data::Example> dataset, const tok::Vocab& vocab, const LitOptions& options = {});

/// [K,D] image embeddings through the frozen encoder and the aligned MAP head.
Tensor lit_image_embeddings(const model::ModelConfig& image_cfg, const model::ParamStore& frozen,
                            const LitModel& lit, const Tensor& images);
/// [K,D] text embeddings from the aligned tower.
Tensor lit_text_embeddings(const LitModel& lit, std::span<const std::string> captions, const tok::Vocab& vocab);

// ---------------------------------------------------------------------------
// Fresh decoder on a frozen encoder, captioning + classification-as-text

struct TransferOptions {
  std::size_t steps = 500;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  /// Fraction of training examples rendered as classification text.
  double class_fraction = 0.5;
};

struct TransferResult {
  model::ModelConfig cfg;
  model::ParamStore params;  // frozen enc.* plus the trained dec.*
  double class_accuracy = 0;  // exact match of "class: <color> <shape>"
  double caption_ce = 0;      // per-token CE on the eval captions
};

/// The classification target of an example is its first object's class.
std::string classification_text(const data::Example& ex);

TransferResult fresh_decoder_transfer(const model::ModelConfig& cfg, const model::ParamStore& frozen,
                                      std::span<const data::Example> train_set,
                                      std::span<const data::Example> eval_set, const tok::Vocab& vocab,
                                      const TransferOptions& options = {});

/// Greedy decoding after a forced prefix of words; stops at EOS or max_len.
std::string greedy_decode(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& image,
                          const tok::Vocab& vocab, std::span<const std::string> prefix = {});

// ---------------------------------------------------------------------------
// Perturbation benchmark

/// Scores the captions against the example's image (higher is better).
using Scorer = std::function<std::vector<double>(const data::Example&, std::span<const std::string>)>;

struct NamedScorer {
  std::string name;
  Scorer score;
};

NamedScorer caption_scorer(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                           model::DecodeMode mode, std::string name = {});
NamedScorer blind_scorer(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                         std::string name = "blind");
NamedScorer contrastive_scorer(const model::ModelConfig& cfg, const model::ParamStore& params,
                               const tok::Vocab& vocab, std::string name = "contrastive");

struct KindResult {
  data::PerturbKind kind;
  std::size_t pairs = 0;
  std::size_t wins = 0;
  double accuracy = 0;  // wins / pairs; 0 when there are no pairs

  bool operator==(const KindResult&) const = default;
};

struct PerturbReport {
  std::vector<std::string> scorers;
  std::vector<data::PerturbKind> kinds;
  std::vector<std::vector<KindResult>> table;  // [scorer][kind]

  const KindResult& at(std::string_view scorer, data::PerturbKind kind) const;
  bool operator==(const PerturbReport&) const = default;
};

/// For every example and kind that applies, builds (true, perturbed) and
/// counts a win when the true caption scores strictly higher. At most
/// `max_pairs` pairs per kind (0: no limit).
PerturbReport perturbation_benchmark(std::span<const NamedScorer> scorers, std::span<const data::Example> dataset,
                                     std::span<const data::PerturbKind> kinds, std::uint64_t seed,
                                     std::size_t max_pairs = 0);

// ---------------------------------------------------------------------------
// CSV reports

/// scorer,kind,pairs,wins,accuracy
void write_perturb_csv(std::ostream& out, const PerturbReport& report);
/// probe,shots,metric,value  (metric: accuracy or class_<i>)
void write_probe_csv(std::ostream& out, const ProbeResult& result);
/// direction,recall_at_1
void write_retrieval_csv(std::ostream& out, const RetrievalResult& result);

}  // namespace cappa::eval
