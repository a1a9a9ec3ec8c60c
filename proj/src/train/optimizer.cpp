#include <cmath>
#include <numbers>

#include "cappa/errors.hpp"
#include "cappa/train.hpp"

namespace cappa::train {

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const auto warmup = cfg.effective_warmup();
  if (step < warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= cfg.steps) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.steps - warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::uint64_t t, double lr,
                  double wd, const AdamHyper& hyper, double grad_scale) {
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw ShapeError("optimizer: parameter, gradient and moment sizes differ");
  }
  if (t == 0) throw ShapeError("optimizer: step count starts at 1");
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]) * grad_scale;
    const double mi = hyper.beta1 * static_cast<double>(m[i]) + (1.0 - hyper.beta1) * gi;
    const double vi = hyper.beta2 * static_cast<double>(v[i]) + (1.0 - hyper.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double pi = static_cast<double>(p[i]);
    const double step = (mi / c1) / (std::sqrt(vi / c2) + hyper.eps) + wd * pi;
    p[i] = static_cast<T>(pi - lr * step);
  }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                  std::uint64_t, double, double, const AdamHyper&, double);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                   std::uint64_t, double, double, const AdamHyper&, double);

OptimizerState init_optimizer(const model::ParamStore& params) {
  OptimizerState st;
  for (const auto& p : params.entries()) {
    st.m.emplace_back(p.value.numel(), 0.0f);
    st.v.emplace_back(p.value.numel(), 0.0f);
  }
  return st;
}

namespace {

bool trainable_at(std::span<const std::uint8_t> trainable, std::size_t i) {
  return trainable.empty() || trainable[i] != 0;
}

}  // namespace

void optimizer_step(model::ParamStore& params, OptimizerState& state, double lr, double wd,
                    std::span<const std::uint8_t> trainable, double grad_scale, const AdamHyper& hyper) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ShapeError("optimizer: state does not match the parameter table");
  }
  if (!trainable.empty() && trainable.size() != entries.size()) {
    throw ShapeError("optimizer: trainable mask does not match the parameter table");
  }
  ++state.t;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!trainable_at(trainable, i)) continue;
    auto& t = entries[i].value;
    if (state.m[i].size() != t.numel()) throw ShapeError("optimizer: moment size mismatch for " + entries[i].name);
    std::vector<float> zeros;
    std::span<const float> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.numel(), 0.0f);
      g = zeros;
    }
    adamw_update<float>(t.mutable_data(), g, state.m[i], state.v[i], state.t, lr, entries[i].decay ? wd : 0.0, hyper,
                        grad_scale);
  }
}

double global_grad_norm(const model::ParamStore& params, std::span<const std::uint8_t> trainable) {
  double s = 0;
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!trainable_at(trainable, i) || !entries[i].value.has_grad()) continue;
    for (float g : entries[i].value.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

}  // namespace cappa::train
