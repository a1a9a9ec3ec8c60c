#pragma once

// Random instances of every differentiable operation, for finite-difference
// checks. Shared by the unit tests and the acceptance runner.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cappa/model.hpp"
#include "gradcheck.hpp"

namespace cappa::testing {

struct GradCase {
  GradFn fn;
  std::vector<TensorD> inputs;
};

struct GradOp {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline TensorD causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = kMaskedOut;
  return TensorD({n, n}, std::move(m));
}

inline std::vector<GradOp> grad_ops() {
  std::vector<GradOp> ops;
  ops.push_back({"matmul", [](auto& rng) {
                   const auto m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
                   return GradCase{[](const auto& x) { return matmul(x[0], x[1]); },
                                   {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}};
                 }});
  ops.push_back({"matmul_batched", [](auto& rng) {
                   const auto b = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                   const bool shared = pick(rng, 0, 1) == 1;
                   Shape bs = shared ? Shape{k, n} : Shape{b, k, n};
                   return GradCase{[](const auto& x) { return matmul(x[0], x[1]); },
                                   {random_tensor(rng, {b, m, k}), random_tensor(rng, bs)}};
                 }});
  ops.push_back({"add", [](auto& rng) {
                   const auto a = pick(rng, 1, 3), b = pick(rng, 1, 4), c = pick(rng, 1, 4);
                   const bool bcast = pick(rng, 0, 1) == 1;
                   return GradCase{[](const auto& x) { return add(x[0], x[1]); },
                                   {random_tensor(rng, {a, b, c}), random_tensor(rng, bcast ? Shape{c} : Shape{a, b, c})}};
                 }});
  ops.push_back({"mul", [](auto& rng) {
                   const auto a = pick(rng, 1, 3), b = pick(rng, 1, 4);
                   const bool bcast = pick(rng, 0, 1) == 1;
                   return GradCase{[](const auto& x) { return mul(x[0], x[1]); },
                                   {random_tensor(rng, {a, b}), random_tensor(rng, bcast ? Shape{b} : Shape{a, b})}};
                 }});
  ops.push_back({"scale", [](auto& rng) {
                   const double f = std::uniform_real_distribution<double>(-3, 3)(rng);
                   return GradCase{[f](const auto& x) { return scale(x[0], f); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)})}};
                 }});
  ops.push_back({"mul_scalar", [](auto& rng) {
                   return GradCase{[](const auto& x) { return mul_scalar(x[0], x[1]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)}), random_tensor(rng, {1})}};
                 }});
  ops.push_back({"exp", [](auto& rng) {
                   return GradCase{[](const auto& x) { return exp(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)}, -2, 2)}};
                 }});
  ops.push_back({"layer_norm", [](auto& rng) {
                   // at width 2 every row normalizes to +-scale and the input gradient is ~0
                   const auto d = pick(rng, 3, 8);
                   return GradCase{[](const auto& x) { return layer_norm(x[0], x[1]); },
                                   {random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3), d}, -2, 2),
                                    random_tensor(rng, {d}, 0.5, 1.5)}};
                 }});
  ops.push_back({"gelu", [](auto& rng) {
                   return GradCase{[](const auto& x) { return gelu(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)}, -3, 3)}};
                 }});
  ops.push_back({"attention", [](auto& rng) {
                   const auto b = pick(rng, 1, 2), n = pick(rng, 1, 4), m = pick(rng, 1, 4), d = pick(rng, 1, 4),
                              dv = pick(rng, 1, 4);
                   return GradCase{[](const auto& x) { return attention(x[0], x[1], x[2]); },
                                   {random_tensor(rng, {b, n, d}), random_tensor(rng, {b, m, d}),
                                    random_tensor(rng, {b, m, dv})}};
                 }});
  ops.push_back({"attention_causal", [](auto& rng) {
                   const auto b = pick(rng, 1, 2), n = pick(rng, 2, 5), d = pick(rng, 1, 4);
                   auto mask = causal_mask(n);
                   return GradCase{[mask](const auto& x) { return attention(x[0], x[1], x[2], mask); },
                                   {random_tensor(rng, {b, n, d}), random_tensor(rng, {b, n, d}),
                                    random_tensor(rng, {b, n, d})}};
                 }});
  ops.push_back({"attention_per_example_mask", [](auto& rng) {
                   // [B,N,N] masks over a [B,H,N,d] layout.
                   const auto b = pick(rng, 2, 3), h = pick(rng, 1, 2), n = pick(rng, 2, 4), d = pick(rng, 1, 3);
                   std::vector<double> m(b * n * n, 0.0);
                   for (std::size_t e = 0; e < b; ++e)
                     if (pick(rng, 0, 1))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = i + 1; j < n; ++j) m[(e * n + i) * n + j] = kMaskedOut;
                   TensorD mask({b, n, n}, std::move(m));
                   return GradCase{[mask](const auto& x) { return attention(x[0], x[1], x[2], mask); },
                                   {random_tensor(rng, {b, h, n, d}), random_tensor(rng, {b, h, n, d}),
                                    random_tensor(rng, {b, h, n, d})}};
                 }});
  ops.push_back({"cross_entropy", [](auto& rng) {
                   const auto r = pick(rng, 1, 5), v = pick(rng, 2, 6);
                   std::vector<std::int32_t> t(r);
                   std::vector<double> w(r);
                   for (std::size_t i = 0; i < r; ++i) {
                     t[i] = static_cast<std::int32_t>(pick(rng, 0, v - 1));
                     w[i] = i == 0 ? 1.0 : static_cast<double>(pick(rng, 0, 1));
                   }
                   return GradCase{[t, w](const auto& x) { return cross_entropy(x[0], t, std::span<const double>(w)); },
                                   {random_tensor(rng, {r, v}, -3, 3)}};
                 }});
  ops.push_back({"embedding", [](auto& rng) {
                   const auto v = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 6);
                   std::vector<std::int32_t> ids(n);
                   for (auto& id : ids) id = static_cast<std::int32_t>(pick(rng, 0, v - 1));  // repeats likely
                   return GradCase{[ids, n](const auto& x) { return embedding(x[0], ids, Shape{n}); },
                                   {random_tensor(rng, {v, d})}};
                 }});
  ops.push_back({"softmax", [](auto& rng) {
                   return GradCase{[](const auto& x) { return softmax(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)}, -3, 3)}};
                 }});
  ops.push_back({"transpose", [](auto& rng) {
                   const int a0 = static_cast<int>(pick(rng, 0, 2)), a1 = static_cast<int>(pick(rng, 0, 2));
                   return GradCase{[a0, a1](const auto& x) { return transpose(x[0], a0, a1); },
                                   {random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)})}};
                 }});
  ops.push_back({"reshape", [](auto& rng) {
                   const auto a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
                   return GradCase{[a, b, c](const auto& x) { return reshape(x[0], Shape{a * b, c}); },
                                   {random_tensor(rng, {a, b, c})}};
                 }});
  ops.push_back({"sum", [](auto& rng) {
                   return GradCase{[](const auto& x) { return sum(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)})}};
                 }});
  ops.push_back({"mean", [](auto& rng) {
                   return GradCase{[](const auto& x) { return mean(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)})}};
                 }});
  ops.push_back({"mean_axis", [](auto& rng) {
                   const int axis = static_cast<int>(pick(rng, 0, 3)) - 1;  // -1..2
                   return GradCase{[axis](const auto& x) { return mean_axis(x[0], axis); },
                                   {random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)})}};
                 }});
  ops.push_back({"dropout", [](auto& rng) {
                   const std::uint64_t seed = rng();
                   const double rate = std::uniform_real_distribution<double>(0.1, 0.6)(rng);
                   return GradCase{[seed, rate](const auto& x) { return dropout(x[0], rate, seed); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)})}};
                 }});
  ops.push_back({"concat", [](auto& rng) {
                   const auto a = pick(rng, 1, 3), b1 = pick(rng, 1, 3), b2 = pick(rng, 1, 3), c = pick(rng, 1, 3);
                   return GradCase{[](const auto& x) { return concat(std::vector<TensorD>{x[0], x[1]}, 1); },
                                   {random_tensor(rng, {a, b1, c}), random_tensor(rng, {a, b2, c})}};
                 }});
  ops.push_back({"slice", [](auto& rng) {
                   const auto n = pick(rng, 2, 6);
                   const auto start = pick(rng, 0, n - 1);
                   const auto len = pick(rng, 1, n - start);
                   return GradCase{[start, len](const auto& x) { return slice(x[0], 1, start, len); },
                                   {random_tensor(rng, {pick(rng, 1, 3), n, pick(rng, 1, 3)})}};
                 }});
  ops.push_back({"l2_normalize", [](auto& rng) {
                   return GradCase{[](const auto& x) { return l2_normalize(x[0]); },
                                   {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 2, 5)})}};
                 }});
  ops.push_back({"multihead_attention", [](auto& rng) {
                   const auto h = pick(rng, 1, 2), dh = pick(rng, 1, 3), d = h * dh;
                   const auto b = pick(rng, 1, 2), n = pick(rng, 1, 3), m = pick(rng, 1, 4);
                   return GradCase{[h](const auto& x) {
                                     return model::multihead_attention(x[0], x[1], x[2], x[3], x[4], x[5], h, TensorD{});
                                   },
                                   {random_tensor(rng, {b, n, d}), random_tensor(rng, {b, m, d}),
                                    random_tensor(rng, {d, d}), random_tensor(rng, {d, d}), random_tensor(rng, {d, d}),
                                    random_tensor(rng, {d, d})}};
                 }});
  ops.push_back({"map_pool", [](auto& rng) {
                   const auto h = pick(rng, 1, 2), dh = pick(rng, 1, 3), d = h * dh;
                   const auto b = pick(rng, 1, 2), m = pick(rng, 1, 4);
                   return GradCase{[h](const auto& x) {
                                     model::MapHead<double> head{x[1], x[2], x[3], x[4], x[5], x[6], h};
                                     return model::pool_map(head, x[0]);
                                   },
                                   {random_tensor(rng, {b, m, d}), random_tensor(rng, {1, d}), random_tensor(rng, {d, d}),
                                    random_tensor(rng, {d, d}), random_tensor(rng, {d, d}), random_tensor(rng, {d, d}),
                                    random_tensor(rng, {d, d})}};
                 }});
  return ops;
}

struct GradOpSummary {
  std::string name;
  std::size_t instances = 0;
  double worst = 0;
  std::string detail;
};

inline GradOpSummary run_grad_op(const GradOp& op, std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradOpSummary s{op.name, instances, 0.0, {}};
  for (std::size_t i = 0; i < instances; ++i) {
    auto c = op.make(rng);
    const auto r = grad_check(c.fn, std::move(c.inputs), rng);
    if (r.max_rel_err > s.worst) {
      s.worst = r.max_rel_err;
      s.detail = "instance " + std::to_string(i) + ", " + r.detail;
    }
  }
  return s;
}

}  // namespace cappa::testing
