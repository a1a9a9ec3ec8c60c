#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cappa/errors.hpp"
#include "cappa/objective.hpp"
#include "cappa/rng.hpp"

namespace cappa::objective {
namespace {

using model::DecodeMode;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// log softmax(row)[target] in double.
double log_prob(std::span<const float> row, std::int32_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : row) mx = std::max(mx, static_cast<double>(v));
  double s = 0;
  for (float v : row) s += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(row[static_cast<std::size_t>(target)]) - mx - std::log(s);
}

Tensor repeat_rows(const Tensor& seq, std::size_t count) {
  const auto per = seq.numel();
  std::vector<float> out(per * count);
  for (std::size_t c = 0; c < count; ++c) std::copy(seq.data().begin(), seq.data().end(), out.begin() + static_cast<std::ptrdiff_t>(c * per));
  Shape s{count};
  for (auto d : seq.shape()) s.push_back(d);
  return Tensor(std::move(s), std::move(out));
}

std::vector<tok::TokenSeq> encode_all(std::span<const std::string> captions, const tok::Vocab& vocab,
                                      std::size_t max_len) {
  std::vector<tok::TokenSeq> seqs;
  seqs.reserve(captions.size());
  for (const auto& c : captions) seqs.push_back(tok::encode(c, vocab, max_len));
  return seqs;
}

model::EncoderOut zero_encoder(const model::ModelConfig& cfg) {
  return model::EncoderOut{Tensor::zeros({cfg.num_patches(), cfg.width})};
}

}  // namespace

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const auto& s0 = images.front().shape();
  const auto per = images.front().numel();
  std::vector<float> out(per * images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s0) throw ShapeError("stack_images: mixed image shapes");
    std::copy(images[i].data().begin(), images[i].data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape s{images.size()};
  for (auto d : s0) s.push_back(d);
  return Tensor(std::move(s), std::move(out));
}

Batch make_batch(std::span<const data::Example> examples, std::span<const std::size_t> indices,
                 const tok::Vocab& vocab, std::size_t max_len) {
  std::vector<Tensor> imgs;
  Batch b;
  for (auto i : indices) {
    imgs.push_back(examples[i].image);
    b.captions.push_back(tok::encode(examples[i].caption, vocab, max_len));
  }
  b.images = stack_images(imgs);
  return b;
}

bool draws_parallel(const model::ModelConfig& cfg, const DrawKey& key, std::size_t index) {
  const double p = cfg.objective == model::Objective::kCapPa ? cfg.parallel_fraction : 0.0;
  const double u = cfg.batch_level_mixing ? keyed_uniform(key.seed, {stream::kModeDraw, key.step})
                                          : keyed_uniform(key.seed, {stream::kModeDraw, key.step, index});
  return u < p;
}

bool draws_reverse(const model::ModelConfig& cfg, const DrawKey& key, std::size_t index) {
  return keyed_uniform(key.seed, {stream::kReverse, key.step, index}) < cfg.reverse_prob;
}

CaptionLoss caption_loss(const model::ModelConfig& cfg, const model::ParamStore& params, const Batch& batch,
                         const DrawKey& key, const LossOptions& options) {
  if (!cfg.is_captioner()) throw ConfigError("caption_loss requires objective cap or cappa");
  const auto B = batch.size(), N = cfg.max_len;
  if (B == 0) throw ShapeError("caption_loss: empty batch");
  if (batch.images.dim() != 4 || batch.images.size(0) != B) throw ShapeError("caption_loss: image batch mismatch");

  CaptionLoss out;
  out.modes.resize(B);
  std::vector<std::int32_t> inputs(B * N), targets(B * N);
  std::vector<float> weights(B * N);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& cap = batch.captions[i];
    if (cap.size() != N) throw ShapeError("caption_loss: caption length differs from max_len");
    const auto seq = draws_reverse(cfg, key, i) ? tok::reverse_caption(cap) : cap;
    const bool parallel = draws_parallel(cfg, key, i);
    out.modes[i] = parallel ? DecodeMode::kParallel : DecodeMode::kCausal;
    for (std::size_t j = 0; j < N; ++j) {
      inputs[i * N + j] = parallel ? tok::kMask : seq.ids[j];
      const bool has_next = j + 1 < N;
      targets[i * N + j] = has_next ? seq.ids[j + 1] : tok::kPad;
      weights[i * N + j] = has_next && seq.valid[j + 1] ? 1.0f : 0.0f;
    }
  }

  Tensor enc;
  if (options.blind) {
    enc = Tensor::zeros({B, cfg.num_patches(), cfg.width});
  } else if (options.frozen_encoder) {
    NoGradScope<float> guard;
    enc = model::encode_images(cfg, params, batch.images);
  } else {
    enc = model::encode_images(cfg, params, batch.images);
  }

  const auto mask = model::self_attention_mask(out.modes, N);
  out.causal_mask_applied = mask.defined();
  const auto logits = model::decode_batch(cfg, params, enc, inputs, N, mask);
  const auto flat = reshape(logits, {B * N, cfg.vocab});
  out.loss = cross_entropy(flat, std::span<const std::int32_t>(targets), std::span<const float>(weights));

  double sum[2] = {0, 0};
  std::size_t count[2] = {0, 0};
  const auto data = logits.data();
  for (std::size_t r = 0; r < B * N; ++r) {
    if (weights[r] == 0.0f) continue;
    const int branch = out.modes[r / N] == DecodeMode::kParallel ? 1 : 0;
    sum[branch] -= log_prob(data.subspan(r * cfg.vocab, cfg.vocab), targets[r]);
    ++count[branch];
  }
  out.loss_causal = count[0] ? sum[0] / static_cast<double>(count[0]) : kNaN;
  out.loss_parallel = count[1] ? sum[1] / static_cast<double>(count[1]) : kNaN;
  return out;
}

Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& log_temp) {
  if (img_emb.dim() != 2 || img_emb.shape() != txt_emb.shape()) {
    throw ShapeError("contrastive_loss: embeddings must share shape [B,D], got " + shape_string(img_emb.shape()) +
                     " and " + shape_string(txt_emb.shape()));
  }
  const auto B = img_emb.size(0);
  if (B < 2) throw BatchTooSmall("contrastive_loss needs at least 2 pairs, got " + std::to_string(B));
  const auto a = l2_normalize(img_emb);
  const auto b = l2_normalize(txt_emb);
  const auto inv_temp = exp(scale(log_temp, -1.0));
  const auto sim = mul_scalar(matmul(a, transpose(b, 0, 1)), inv_temp);
  std::vector<std::int32_t> diag(B);
  std::iota(diag.begin(), diag.end(), 0);
  const std::vector<float> ones(B, 1.0f);
  const auto rows = cross_entropy(sim, std::span<const std::int32_t>(diag), std::span<const float>(ones));
  const auto cols = cross_entropy(transpose(sim, 0, 1), std::span<const std::int32_t>(diag), std::span<const float>(ones));
  return scale(add(rows, cols), 0.5);
}

Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double temperature) {
  if (!(temperature > 0)) throw ConfigError("contrastive_loss: temperature must be positive");
  return contrastive_loss(img_emb, txt_emb, Tensor({1}, {static_cast<float>(std::log(temperature))}));
}

Tensor clip_loss(const model::ModelConfig& cfg, const model::ParamStore& params, const Batch& batch,
                 const LossOptions& options) {
  if (cfg.objective != model::Objective::kClip) throw ConfigError("clip_loss requires objective clip");
  const auto N = cfg.max_len;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> valid;
  for (const auto& c : batch.captions) {
    if (c.size() != N) throw ShapeError("clip_loss: caption length differs from max_len");
    ids.insert(ids.end(), c.ids.begin(), c.ids.end());
    valid.insert(valid.end(), c.valid.begin(), c.valid.end());
  }
  Tensor enc;
  if (options.frozen_encoder) {
    NoGradScope<float> guard;
    enc = model::encode_images(cfg, params, batch.images);
  } else {
    enc = model::encode_images(cfg, params, batch.images);
  }
  const auto img = model::image_embedding(cfg, params, enc);
  const auto txt = model::encode_text_tower(cfg, params, ids, valid, N);
  return contrastive_loss(img, txt, params.get("clip.log_temp"));
}

std::vector<double> score_sequences(const model::ModelConfig& cfg, const model::ParamStore& params,
                                    const model::EncoderOut& enc, std::span<const tok::TokenSeq> seqs,
                                    DecodeMode mode) {
  if (seqs.empty()) return {};
  NoGradScope<float> guard;
  const auto C = seqs.size(), N = seqs.front().size();
  std::vector<std::int32_t> inputs(C * N);
  for (std::size_t c = 0; c < C; ++c) {
    if (seqs[c].size() != N) throw ShapeError("score: candidate sequences differ in length");
    for (std::size_t j = 0; j < N; ++j) inputs[c * N + j] = mode == DecodeMode::kParallel ? tok::kMask : seqs[c].ids[j];
  }
  const std::vector<DecodeMode> modes(C, mode);
  const auto logits =
      model::decode_batch(cfg, params, repeat_rows(enc.seq, C), inputs, N, model::self_attention_mask(modes, N));
  const auto data = logits.data();
  std::vector<double> scores(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j + 1 < N; ++j) {
      if (!seqs[c].valid[j + 1]) continue;
      scores[c] += log_prob(data.subspan((c * N + j) * cfg.vocab, cfg.vocab), seqs[c].ids[j + 1]);
    }
  }
  return scores;
}

double score_stepwise(const model::ModelConfig& cfg, const model::ParamStore& params, const model::EncoderOut& enc,
                      const tok::TokenSeq& seq) {
  NoGradScope<float> guard;
  const auto& s = enc.seq.shape();
  const auto enc3 = reshape(enc.seq, {1, s[0], s[1]});
  double total = 0;
  const DecodeMode causal[] = {DecodeMode::kCausal};
  // Fixed-length buffer, PAD after the prefix: every step runs the same
  // shapes, so the only difference from teacher forcing is what follows t.
  const auto N = seq.size();
  const auto mask = model::self_attention_mask(causal, N);
  std::vector<std::int32_t> buf(N, tok::kPad);
  for (std::size_t t = 0; t + 1 < N && seq.valid[t + 1]; ++t) {
    buf[t] = seq.ids[t];
    const auto logits = model::decode_batch(cfg, params, enc3, buf, N, mask);
    total += log_prob(logits.data().subspan(t * cfg.vocab, cfg.vocab), seq.ids[t + 1]);
  }
  return total;
}

std::vector<double> score_captions(const model::ModelConfig& cfg, const model::ParamStore& params,
                                   const tok::Vocab& vocab, const Tensor& image,
                                   std::span<const std::string> captions, DecodeMode mode) {
  const auto seqs = encode_all(captions, vocab, cfg.max_len);
  NoGradScope<float> guard;
  const auto enc = model::encode_image(cfg, params, image);
  return score_sequences(cfg, params, enc, seqs, mode);
}

double score_caption(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                     const Tensor& image, const std::string& caption, DecodeMode mode) {
  return score_captions(cfg, params, vocab, image, std::span<const std::string>(&caption, 1), mode).front();
}

std::vector<double> blind_scores(const model::ModelConfig& cfg, const model::ParamStore& params,
                                 const tok::Vocab& vocab, std::span<const std::string> captions, DecodeMode mode) {
  const auto seqs = encode_all(captions, vocab, cfg.max_len);
  return score_sequences(cfg, params, zero_encoder(cfg), seqs, mode);
}

double blind_score(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                   const std::string& caption, DecodeMode mode) {
  return blind_scores(cfg, params, vocab, std::span<const std::string>(&caption, 1), mode).front();
}

std::vector<double> contrastive_scores(const model::ModelConfig& cfg, const model::ParamStore& params,
                                       const tok::Vocab& vocab, const Tensor& image,
                                       std::span<const std::string> captions) {
  if (captions.empty()) return {};
  NoGradScope<float> guard;
  const auto seqs = encode_all(captions, vocab, cfg.max_len);
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> valid;
  for (const auto& s : seqs) {
    ids.insert(ids.end(), s.ids.begin(), s.ids.end());
    valid.insert(valid.end(), s.valid.begin(), s.valid.end());
  }
  const auto enc = model::encode_image(cfg, params, image);
  const auto img = l2_normalize(model::image_embedding(cfg, params, reshape(enc.seq, {1, cfg.num_patches(), cfg.width}))).data();
  const auto txt = l2_normalize(model::encode_text_tower(cfg, params, ids, valid, cfg.max_len));
  const auto t = txt.data();
  const auto D = cfg.width;
  std::vector<double> out(captions.size(), 0.0);
  for (std::size_t c = 0; c < captions.size(); ++c)
    for (std::size_t d = 0; d < D; ++d) out[c] += static_cast<double>(img[d]) * t[c * D + d];
  return out;
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ShapeError("argmax of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::size_t zero_shot_classify(const model::ModelConfig& cfg, const model::ParamStore& params,
                               const tok::Vocab& vocab, const Tensor& image,
                               std::span<const std::string> class_captions, DecodeMode mode) {
  if (class_captions.size() < 2) throw ConfigError("zero_shot_classify needs at least two candidates");
  const auto scores = score_captions(cfg, params, vocab, image, class_captions, mode);
  return argmax_first(scores);
}

std::size_t zero_shot_classify_contrastive(const model::ModelConfig& cfg, const model::ParamStore& params,
                                           const tok::Vocab& vocab, const Tensor& image,
                                           std::span<const std::string> class_captions) {
  if (class_captions.size() < 2) throw ConfigError("zero_shot_classify needs at least two candidates");
  const auto scores = contrastive_scores(cfg, params, vocab, image, class_captions);
  return argmax_first(scores);
}

}  // namespace cappa::objective
