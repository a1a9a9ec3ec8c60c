#pragma once

// Central finite-difference gradient checks in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cappa/tensor.hpp"

namespace cappa::testing {

inline TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD(std::move(shape), std::move(v), true);
}

struct GradCheckResult {
  double max_rel_err = 0;  // worst input
  std::string detail;
};

using GradFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Reduces f's output against fixed random weights w to a scalar
/// L = sum(f(x) * w), then compares dL/dx from the tape with central
/// differences for every input. Error per input is the norm-wise relative
/// error ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-12).
inline GradCheckResult grad_check(const GradFn& f, std::vector<TensorD> inputs, std::mt19937_64& rng,
                                  double h = 1e-6) {
  TensorD weights;
  {
    NoGradScope<double> ng;
    const auto probe = f(inputs);
    weights = random_tensor(rng, probe.shape());
    weights.set_requires_grad(false);
  }
  auto loss_of = [&](const std::vector<TensorD>& xs) {
    NoGradScope<double> ng;
    const auto out = f(xs);
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out.data()[i] * weights.data()[i];
    return s;
  };

  for (auto& x : inputs) x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto out = f(inputs);
    tape.backward(sum(mul(out, weights)));
  }

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    if (!x.requires_grad()) continue;
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      auto d = x.mutable_data();
      const double orig = d[i];
      d[i] = orig + h;
      const double up = loss_of(inputs);
      d[i] = orig - h;
      const double down = loss_of(inputs);
      d[i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.detail = "input " + std::to_string(k) + " shape " + shape_string(x.shape());
    }
  }
  return res;
}

}  // namespace cappa::testing
