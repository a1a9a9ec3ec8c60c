#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/objective.hpp"
#include "cappa/rng.hpp"
#include "cappa/train.hpp"

namespace cappa::eval {

std::string classification_text(const data::Example& ex) {
  if (ex.scene.objects.empty()) throw ShapeError("classification_text: example without objects");
  return data::class_text(data::class_label(ex.scene.objects.front()));
}

std::string greedy_decode(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& image,
                          const tok::Vocab& vocab, std::span<const std::string> prefix) {
  NoGradScope<float> guard;
  const auto enc = model::encode_image(cfg, params, image);
  const auto enc3 = reshape(enc.seq, {1, cfg.num_patches(), cfg.width});
  tok::TokenSeq seq;
  seq.ids.push_back(tok::kBos);
  for (const auto& w : prefix) {
    const auto id = vocab.find(w);
    if (!id || *id < tok::kNumSpecial) throw OOVError(w);
    seq.ids.push_back(*id);
  }
  if (seq.ids.size() >= cfg.max_len) throw LengthError("greedy_decode: prefix does not fit max_len");
  while (seq.ids.size() < cfg.max_len) {
    const auto L = seq.ids.size();
    const model::DecodeMode causal[] = {model::DecodeMode::kCausal};
    const auto logits = model::decode_batch(cfg, params, enc3, seq.ids, L, model::self_attention_mask(causal, L));
    const auto row = logits.data().subspan((L - 1) * cfg.vocab, cfg.vocab);
    // EOS or a word; BOS, PAD and MASK are never emitted.
    std::int32_t best = tok::kEos;
    for (std::int32_t v = tok::kNumSpecial; v < static_cast<std::int32_t>(cfg.vocab); ++v) {
      if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
    }
    if (best == tok::kEos) break;
    seq.ids.push_back(best);
  }
  seq.valid.assign(seq.ids.size(), 1);
  return tok::decode(seq, vocab);
}

TransferResult fresh_decoder_transfer(const model::ModelConfig& cfg, const model::ParamStore& frozen,
                                      std::span<const data::Example> train_set,
                                      std::span<const data::Example> eval_set, const tok::Vocab& vocab,
                                      const TransferOptions& options) {
  if (train_set.empty() || eval_set.empty()) throw ConfigError("fresh_decoder_transfer: empty task split");
  TransferResult res;
  res.cfg = cfg;
  res.cfg.objective = model::Objective::kCap;
  res.cfg.parallel_fraction = 0.0;
  res.cfg.reverse_prob = 0.0;
  if (res.cfg.dec_layers == 0) res.cfg.dec_layers = std::max<std::size_t>(1, res.cfg.enc_layers / 2);
  res.cfg.validate();

  const auto init_seed = derive_seed(options.seed, {stream::kInit});
  auto fresh = model::init_params(res.cfg, init_seed);
  model::ParamStore params;
  for (const auto& p : frozen.entries()) {
    if (p.name.rfind("enc.", 0) == 0) params.add(p.name, p.value.clone(), p.decay);
  }
  for (const auto& p : fresh.entries()) {
    if (p.name.rfind("dec.", 0) == 0) params.add(p.name, p.value, p.decay);
  }

  train::TrainData data{{}, vocab};
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    auto ex = train_set[i];
    if (keyed_uniform(options.seed, {stream::kProbe, i}) < options.class_fraction) ex.caption = classification_text(ex);
    data.examples.push_back(std::move(ex));
  }

  train::TrainConfig tcfg;
  tcfg.steps = options.steps;
  tcfg.batch = options.batch;
  tcfg.base_lr = options.lr;
  tcfg.seed = options.seed;
  tcfg.freeze = train::FreezeMode::kEncoder;
  auto result = train::train(res.cfg, tcfg, data, std::move(params));
  res.params = std::move(result.state.params);

  const std::string prompt[] = {std::string(data::kClassPrefix)};
  std::size_t hits = 0;
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& ex : eval_set) {
    const auto text = greedy_decode(res.cfg, res.params, ex.image, vocab, prompt);
    const auto label = data::parse_class_text(text);
    hits += label && *label == data::class_label(ex.scene.objects.front()) ? 1 : 0;

    const auto seq = tok::encode(ex.caption, vocab, res.cfg.max_len);
    NoGradScope<float> guard;
    const auto enc = model::encode_image(res.cfg, res.params, ex.image);
    nll -= objective::score_sequences(res.cfg, res.params, enc, std::span<const tok::TokenSeq>(&seq, 1),
                                      model::DecodeMode::kCausal)
               .front();
    tokens += seq.valid_count() - 1;
  }
  res.class_accuracy = static_cast<double>(hits) / static_cast<double>(eval_set.size());
  res.caption_ce = nll / static_cast<double>(tokens);
  return res;
}

}  // namespace cappa::eval
