#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/rng.hpp"
#include "cappa/train.hpp"

namespace cappa::eval {
namespace {

struct Split {
  std::vector<std::size_t> train, val, eval;
};

Split split_classes(std::span<const int> labels, std::size_t classes, std::size_t k, std::size_t val_per_class,
                    std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError("probe: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(classes) + ")");
    }
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  Split s;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& v = by_class[c];
    if (v.size() < k) {
      throw InsufficientShots("class " + std::to_string(c) + " has " + std::to_string(v.size()) +
                              " examples, a " + std::to_string(k) + "-shot probe needs " + std::to_string(k));
    }
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
    const auto nv = std::min(val_per_class, v.size() - k);
    s.train.insert(s.train.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
    s.val.insert(s.val.end(), v.begin() + static_cast<std::ptrdiff_t>(k), v.begin() + static_cast<std::ptrdiff_t>(k + nv));
    s.eval.insert(s.eval.end(), v.begin() + static_cast<std::ptrdiff_t>(k + nv), v.end());
  }
  if (s.eval.empty()) throw InsufficientShots("probe: no examples left for evaluation after the k-shot split");
  return s;
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

// Per-dimension standardization with statistics of the training rows.
struct Standardizer {
  std::vector<double> mean, inv_std;

  explicit Standardizer(const Tensor& train) {
    const auto D = train.size(-1), rows = train.numel() / D;
    mean.assign(D, 0.0);
    inv_std.assign(D, 1.0);
    std::vector<double> sq(D, 0.0);
    const auto d = train.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < D; ++j) {
        mean[j] += d[r * D + j];
        sq[j] += static_cast<double>(d[r * D + j]) * d[r * D + j];
      }
    for (std::size_t j = 0; j < D; ++j) {
      mean[j] /= static_cast<double>(rows);
      const double var = sq[j] / static_cast<double>(rows) - mean[j] * mean[j];
      inv_std[j] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
  }

  Tensor apply(const Tensor& x) const {
    const auto D = mean.size();
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>((out[i] - mean[i % D]) * inv_std[i % D]);
    }
    return Tensor(x.shape(), std::move(out));
  }
};

struct Head {
  ProbeKind kind;
  std::size_t heads;
  model::ParamStore params;
};

void add_param(model::ParamStore& store, const std::string& name, Tensor t, bool decay) {
  t.set_requires_grad(true);
  store.add(name, std::move(t), decay);
}

Tensor small_normal(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.02);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor(std::move(shape), std::move(v));
}

Head make_head(ProbeKind kind, std::size_t D, std::size_t C, const ProbeOptions& opt, std::uint64_t seed) {
  Head h{kind, opt.map_heads, {}};
  auto& p = h.params;
  std::size_t in = D;
  if (kind == ProbeKind::kMlp) {
    const auto H = opt.mlp_hidden ? opt.mlp_hidden : D;
    add_param(p, "probe.fc1.w", small_normal({D, H}, derive_seed(seed, {1})), true);
    add_param(p, "probe.fc1.b", Tensor::zeros({H}), false);
    in = H;
  } else if (kind == ProbeKind::kMap) {
    model::init_map_head(p, "probe.map.", D, seed);
  }
  add_param(p, "probe.w", small_normal({in, C}, derive_seed(seed, {2})), true);
  add_param(p, "probe.b", Tensor::zeros({C}), false);
  return h;
}

Tensor head_logits(const Head& h, const Tensor& x) {
  const auto& p = h.params;
  Tensor z;
  switch (h.kind) {
    case ProbeKind::kLinear:
      z = x;
      break;
    case ProbeKind::kMlp:
      z = gelu(add(matmul(x, p.get("probe.fc1.w")), p.get("probe.fc1.b")));
      break;
    case ProbeKind::kMap:
      z = model::pool_map(model::map_head_view(p, "probe.map.", h.heads), x);
      break;
  }
  return add(matmul(z, p.get("probe.w")), p.get("probe.b"));
}

void fit(Head& h, const Tensor& x, std::span<const int> y, double lr, double wd, std::size_t steps) {
  std::vector<std::int32_t> targets(y.begin(), y.end());
  const std::vector<float> weights(y.size(), 1.0f);
  train::TrainConfig sched;
  sched.steps = steps;
  sched.base_lr = lr;
  sched.warmup_steps = 0;
  auto opt = train::init_optimizer(h.params);
  for (std::size_t step = 0; step < steps; ++step) {
    h.params.zero_grad();
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      const auto loss = cross_entropy(head_logits(h, x), std::span<const std::int32_t>(targets),
                                      std::span<const float>(weights));
      tape.backward(loss);
    }
    train::optimizer_step(h.params, opt, train::lr_at(step, sched), wd);
  }
  h.params.zero_grad();
}

std::vector<int> predict(const Head& h, const Tensor& x) {
  NoGradScope<float> guard;
  const auto logits = head_logits(h, x);
  const auto C = logits.size(1);
  std::vector<int> out;
  const auto d = logits.data();
  for (std::size_t r = 0; r < logits.size(0); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (d[r * C + c] > d[r * C + best]) best = c;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::vector<int> pick(std::span<const int> labels, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (auto i : idx) out.push_back(labels[i]);
  return out;
}

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace

std::string_view probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kLinear: return "linear";
    case ProbeKind::kMlp: return "mlp";
    case ProbeKind::kMap: return "map";
  }
  return "?";
}

std::optional<ProbeKind> parse_probe_kind(std::string_view name) {
  for (auto k : {ProbeKind::kLinear, ProbeKind::kMlp, ProbeKind::kMap})
    if (probe_kind_name(k) == name) return k;
  return std::nullopt;
}

ProbeResult kshot_probe(const Tensor& features, std::span<const int> labels, std::size_t k, ProbeKind kind,
                        std::uint64_t seed, const ProbeOptions& options) {
  const std::size_t want_rank = kind == ProbeKind::kMap ? 3 : 2;
  if (features.dim() != want_rank) {
    throw ShapeError("probe: " + std::string(probe_kind_name(kind)) + " probe expects rank-" +
                     std::to_string(want_rank) + " features, got " + shape_string(features.shape()));
  }
  if (features.size(0) != labels.size()) throw ShapeError("probe: feature and label counts differ");
  if (k == 0) throw InsufficientShots("probe: k must be positive");
  if (options.seeds == 0 || options.lrs.empty() || options.wds.empty()) throw ConfigError("probe: empty sweep");

  const auto C = options.num_classes;
  const auto D = features.size(-1);
  ProbeResult res;
  res.kind = kind;
  res.shots = k;
  std::vector<double> class_sum(C, 0.0);
  std::vector<std::size_t> class_runs(C, 0);

  for (std::size_t s = 0; s < options.seeds; ++s) {
    const auto split = split_classes(labels, C, k, options.val_per_class, derive_seed(seed, {stream::kProbe, s}));
    const auto xtr_raw = gather_rows(features, split.train);
    const Standardizer norm(xtr_raw);
    const auto xtr = norm.apply(xtr_raw);
    const auto ytr = pick(labels, split.train);
    const auto yev = pick(labels, split.eval);
    const auto xev = norm.apply(gather_rows(features, split.eval));
    const bool has_val = !split.val.empty();
    const auto yval = pick(labels, split.val);
    const auto xval = has_val ? norm.apply(gather_rows(features, split.val)) : Tensor{};

    std::optional<Head> best;
    double best_score = -1;
    std::size_t cfg_index = 0;
    for (double lr : options.lrs) {
      for (double wd : options.wds) {
        auto h = make_head(kind, D, C, options, derive_seed(seed, {stream::kProbe, s, 1000 + cfg_index++}));
        fit(h, xtr, ytr, lr, wd, options.steps);
        const double score = has_val ? accuracy(predict(h, xval), yval) : 0.0;
        if (score > best_score) {
          best_score = score;
          best = std::move(h);
          res.lr = lr;
          res.weight_decay = wd;
        }
      }
    }
    const auto pred = predict(*best, xev);
    res.accuracy += accuracy(pred, yev);
    std::vector<std::size_t> hit(C, 0), total(C, 0);
    for (std::size_t i = 0; i < yev.size(); ++i) {
      const auto c = static_cast<std::size_t>(yev[i]);
      ++total[c];
      hit[c] += pred[i] == yev[i] ? 1 : 0;
    }
    for (std::size_t c = 0; c < C; ++c) {
      if (total[c] == 0) continue;
      class_sum[c] += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
      ++class_runs[c];
    }
  }
  res.accuracy /= static_cast<double>(options.seeds);
  res.per_class.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    res.per_class[c] = class_runs[c] ? class_sum[c] / static_cast<double>(class_runs[c])
                                     : std::numeric_limits<double>::quiet_NaN();
  }
  return res;
}

}  // namespace cappa::eval
