#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/objective.hpp"
#include "cappa/rng.hpp"

namespace cappa::eval {

NamedScorer caption_scorer(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                           model::DecodeMode mode, std::string name) {
  if (name.empty()) name = mode == model::DecodeMode::kCausal ? "cap-causal" : "cap-parallel";
  return {std::move(name), [cfg, params, vocab, mode](const data::Example& ex, std::span<const std::string> caps) {
            return objective::score_captions(cfg, params, vocab, ex.image, caps, mode);
          }};
}

NamedScorer blind_scorer(const model::ModelConfig& cfg, const model::ParamStore& params, const tok::Vocab& vocab,
                         std::string name) {
  return {std::move(name), [cfg, params, vocab](const data::Example&, std::span<const std::string> caps) {
            return objective::blind_scores(cfg, params, vocab, caps);
          }};
}

NamedScorer contrastive_scorer(const model::ModelConfig& cfg, const model::ParamStore& params,
                               const tok::Vocab& vocab, std::string name) {
  return {std::move(name), [cfg, params, vocab](const data::Example& ex, std::span<const std::string> caps) {
            return objective::contrastive_scores(cfg, params, vocab, ex.image, caps);
          }};
}

const KindResult& PerturbReport::at(std::string_view scorer, data::PerturbKind kind) const {
  for (std::size_t s = 0; s < scorers.size(); ++s) {
    if (scorers[s] != scorer) continue;
    for (std::size_t k = 0; k < kinds.size(); ++k)
      if (kinds[k] == kind) return table[s][k];
  }
  throw ConfigError("perturbation report has no entry for " + std::string(scorer) + "/" +
                    std::string(data::kind_name(kind)));
}

PerturbReport perturbation_benchmark(std::span<const NamedScorer> scorers, std::span<const data::Example> dataset,
                                     std::span<const data::PerturbKind> kinds, std::uint64_t seed,
                                     std::size_t max_pairs) {
  PerturbReport report;
  report.kinds.assign(kinds.begin(), kinds.end());
  for (const auto& s : scorers) report.scorers.push_back(s.name);
  report.table.assign(scorers.size(), {});
  for (auto kind : kinds) {
    std::vector<std::pair<std::size_t, data::PerturbedPair>> pairs;
    for (std::size_t i = 0; i < dataset.size() && (max_pairs == 0 || pairs.size() < max_pairs); ++i) {
      try {
        pairs.emplace_back(i, data::perturb(dataset[i], kind, derive_seed(seed, {i})));
      } catch (const PerturbError&) {
      }
    }
    for (std::size_t s = 0; s < scorers.size(); ++s) {
      KindResult r{kind, pairs.size(), 0, 0.0};
      for (const auto& [i, pair] : pairs) {
        const std::string caps[] = {pair.positive, pair.negative};
        const auto scores = scorers[s].score(dataset[i], caps);
        r.wins += scores.at(0) > scores.at(1) ? 1 : 0;
      }
      r.accuracy = r.pairs ? static_cast<double>(r.wins) / static_cast<double>(r.pairs) : 0.0;
      report.table[s].push_back(r);
    }
  }
  return report;
}

}  // namespace cappa::eval
