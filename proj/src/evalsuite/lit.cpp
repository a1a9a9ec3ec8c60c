#include <cmath>

#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/objective.hpp"
#include "cappa/rng.hpp"
#include "cappa/train.hpp"

namespace cappa::eval {
namespace {

model::ModelConfig tower_config(const model::ModelConfig& image_cfg) {
  auto cfg = image_cfg;
  cfg.objective = model::Objective::kClip;
  cfg.parallel_fraction = 0.0;
  cfg.reverse_prob = 0.0;
  return cfg;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  const auto per = x.numel() / x.size(0);
  std::vector<float> out;
  out.reserve(idx.size() * per);
  for (auto i : idx) {
    const auto b = x.data().begin() + static_cast<std::ptrdiff_t>(i * per);
    out.insert(out.end(), b, b + static_cast<std::ptrdiff_t>(per));
  }
  Shape s = x.shape();
  s[0] = idx.size();
  return Tensor(std::move(s), std::move(out));
}

struct TokenBatch {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> valid;
};

TokenBatch tokenize(std::span<const std::string> captions, const tok::Vocab& vocab, std::size_t max_len) {
  TokenBatch b;
  for (const auto& c : captions) {
    const auto s = tok::encode(c, vocab, max_len);
    b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
    b.valid.insert(b.valid.end(), s.valid.begin(), s.valid.end());
  }
  return b;
}

}  // namespace

LitModel lit_align(const model::ModelConfig& image_cfg, const model::ParamStore& frozen,
                   std::span<const data::Example> dataset, const tok::Vocab& vocab, const LitOptions& options) {
  if (dataset.size() < 2) throw ConfigError("lit_align needs at least two examples");
  LitModel lit;
  lit.cfg = tower_config(image_cfg);
  lit.cfg.validate();
  lit.map_heads = options.map_heads;
  const auto init_seed = derive_seed(options.seed, {stream::kInit});
  auto full = model::init_params(lit.cfg, init_seed);
  for (auto& p : full.entries()) {
    if (p.name.rfind("txt.", 0) == 0 || p.name == "clip.log_temp") lit.params.add(p.name, p.value, p.decay);
  }
  model::init_map_head(lit.params, "map.", lit.cfg.width, init_seed);

  const auto seqs = extract_sequences(image_cfg, frozen, images_of(dataset));
  std::vector<std::string> captions;
  for (const auto& e : dataset) captions.push_back(e.caption);

  train::TrainConfig sched;
  sched.steps = options.steps;
  sched.base_lr = options.lr;
  sched.batch = options.batch;
  sched.validate();
  auto opt = train::init_optimizer(lit.params);
  const auto B = std::min(options.batch, dataset.size());
  for (std::size_t step = 0; step < options.steps; ++step) {
    const auto idx = train::batch_indices(options.seed, step, B, dataset.size());
    std::vector<std::string> caps;
    for (auto i : idx) caps.push_back(captions[i]);
    const auto tb = tokenize(caps, vocab, lit.cfg.max_len);
    const auto enc = gather_rows(seqs, idx);
    lit.params.zero_grad();
    double loss_value = 0;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      const auto img = model::pool_map(model::map_head_view(lit.params, "map.", options.map_heads), enc);
      const auto txt = model::encode_text_tower(lit.cfg, lit.params, tb.ids, tb.valid, lit.cfg.max_len);
      const auto loss = objective::contrastive_loss(img, txt, lit.params.get("clip.log_temp"));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw Error("lit_align diverged at step " + std::to_string(step));
      tape.backward(loss);
    }
    const double norm = train::global_grad_norm(lit.params);
    const double gscale = norm > sched.clip_norm ? sched.clip_norm / norm : 1.0;
    train::optimizer_step(lit.params, opt, train::lr_at(step, sched), options.weight_decay, {}, gscale);
    lit.losses.push_back(loss_value);
  }
  lit.params.zero_grad();
  return lit;
}

Tensor lit_image_embeddings(const model::ModelConfig& image_cfg, const model::ParamStore& frozen,
                            const LitModel& lit, const Tensor& images) {
  const auto seqs = extract_sequences(image_cfg, frozen, images);
  NoGradScope<float> guard;
  return model::pool_map(model::map_head_view(lit.params, "map.", lit.map_heads), seqs);
}

Tensor lit_text_embeddings(const LitModel& lit, std::span<const std::string> captions, const tok::Vocab& vocab) {
  NoGradScope<float> guard;
  const auto tb = tokenize(captions, vocab, lit.cfg.max_len);
  return model::encode_text_tower(lit.cfg, lit.params, tb.ids, tb.valid, lit.cfg.max_len);
}

}  // namespace cappa::eval
