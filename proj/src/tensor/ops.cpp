#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <random>

#include "cappa/tensor.hpp"

namespace cappa {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
Tape<T>* recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(a);
}

// Number of leading repetitions of `b` inside `a` when b's shape is a suffix
// of a's shape.
std::size_t suffix_repeats(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size() || !std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    throw ShapeError(std::string(op) + ": " + shape_string(b) + " does not broadcast to " + shape_string(a));
  }
  const auto nb = shape_numel(b);
  return nb == 0 ? 0 : shape_numel(a) / nb;
}

// [outer, axis, inner] factorization around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Swaps axes a0 < a1 by viewing the buffer as [P, A, Q, B, S].
template <typename T>
void swap_axes_copy(std::span<const T> src, const Shape& shape, std::size_t a0, std::size_t a1, std::span<T> dst,
                    bool accumulate) {
  std::size_t P = 1, Q = 1, S = 1;
  for (std::size_t i = 0; i < a0; ++i) P *= shape[i];
  for (std::size_t i = a0 + 1; i < a1; ++i) Q *= shape[i];
  for (std::size_t i = a1 + 1; i < shape.size(); ++i) S *= shape[i];
  const std::size_t A = shape[a0];
  const std::size_t B = shape[a1];
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t b = 0; b < B; ++b) {
          const T* in = src.data() + ((((p * A + a) * Q + q) * B + b) * S);
          T* out = dst.data() + ((((p * B + b) * Q + q) * A + a) * S);
          if (accumulate) {
            for (std::size_t s = 0; s < S; ++s) out[s] += in[s];
          } else {
            std::memcpy(out, in, S * sizeof(T));
          }
        }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) throw ShapeError("matmul: inner extents differ " + shape_string(as) + " x " + shape_string(bs));
  const bool shared = bs.size() == 2;
  if (!shared && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw ShapeError("matmul: batch extents differ " + shape_string(as) + " x " + shape_string(bs));
  }
  const std::size_t batch = (m * k == 0) ? 0 : a.numel() / (m * k);
  Shape out_shape = as;
  out_shape.back() = n;
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const auto im = static_cast<Eigen::Index>(m), ik = static_cast<Eigen::Index>(k), in = static_cast<Eigen::Index>(n);

  if (shared) {
    const auto rows = static_cast<Eigen::Index>(batch * m);
    MutMap<T>(out.data(), rows, in).noalias() = ConstMap<T>(pa, rows, ik) * ConstMap<T>(pb, ik, in);
  } else {
    for (std::size_t g = 0; g < batch; ++g) {
      MutMap<T>(out.data() + g * m * n, im, in).noalias() =
          ConstMap<T>(pa + g * m * k, im, ik) * ConstMap<T>(pb + g * k * n, ik, in);
    }
  }
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording({&a, &b})) {
    result.set_requires_grad(true);
    tape->record("matmul", {a, b}, result, [a, b, result, batch, m, k, n, shared] {
      const auto im = static_cast<Eigen::Index>(m), ik = static_cast<Eigen::Index>(k),
                 in = static_cast<Eigen::Index>(n);
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      const T* pg = result.grad().data();
      if (shared) {
        const auto rows = static_cast<Eigen::Index>(batch * m);
        ConstMap<T> G(pg, rows, in);
        if (a.requires_grad()) {
          MutMap<T>(a.grad_accumulator().data(), rows, ik).noalias() += G * ConstMap<T>(pb, ik, in).transpose();
        }
        if (b.requires_grad()) {
          MutMap<T>(b.grad_accumulator().data(), ik, in).noalias() += ConstMap<T>(pa, rows, ik).transpose() * G;
        }
        return;
      }
      for (std::size_t g = 0; g < batch; ++g) {
        ConstMap<T> G(pg + g * m * n, im, in);
        if (a.requires_grad()) {
          MutMap<T>(a.grad_accumulator().data() + g * m * k, im, ik).noalias() +=
              G * ConstMap<T>(pb + g * k * n, ik, in).transpose();
        }
        if (b.requires_grad()) {
          MutMap<T>(b.grad_accumulator().data() + g * k * n, ik, in).noalias() +=
              ConstMap<T>(pa + g * m * k, im, ik).transpose() * G;
        }
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t reps = suffix_repeats(a.shape(), b.shape(), "add");
  const std::size_t nb = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < nb; ++i) out[r * nb + i] += bd[i];
  BasicTensor<T> result(a.shape(), std::move(out));
  if (auto* tape = recording({&a, &b})) {
    result.set_requires_grad(true);
    tape->record("add", {a, b}, result, [a, b, result, reps, nb] {
      const auto g = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_accumulator();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[r * nb + i];
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t reps = suffix_repeats(a.shape(), b.shape(), "mul");
  const std::size_t nb = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < nb; ++i) out[r * nb + i] *= bd[i];
  BasicTensor<T> result(a.shape(), std::move(out));
  if (auto* tape = recording({&a, &b})) {
    result.set_requires_grad(true);
    tape->record("mul", {a, b}, result, [a, b, result, reps, nb] {
      const auto g = result.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_accumulator();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) ga[r * nb + i] += g[r * nb + i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_accumulator();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[r * nb + i] * ad[r * nb + i];
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= f;
  BasicTensor<T> result(a.shape(), std::move(out));
  if (auto* tape = recording({&a})) {
    result.set_requires_grad(true);
    tape->record("scale", {a}, result, [a, result, f] {
      const auto g = result.grad();
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, const BasicTensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must have one element");
  const T f = s.item();
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= f;
  BasicTensor<T> result(a.shape(), std::move(out));
  if (auto* tape = recording({&a, &s})) {
    result.set_requires_grad(true);
    tape->record("mul_scalar", {a, s}, result, [a, s, result] {
      const auto g = result.grad();
      const T f = s.item();
      if (a.requires_grad()) {
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
      }
      if (s.requires_grad()) {
        const auto ad = a.data();
        T acc = 0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ad[i];
        s.grad_accumulator()[0] += acc;
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = std::exp(v);
  BasicTensor<T> result(a.shape(), std::move(out));
  if (auto* tape = recording({&a})) {
    result.set_requires_grad(true);
    tape->record("exp", {a}, result, [a, result] {
      const auto g = result.grad();
      const auto y = result.data();
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& scale_param) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layer_norm: rank 0 input");
  const std::size_t D = xs.back();
  if (scale_param.dim() != 1 || scale_param.size(0) != D) {
    throw ShapeError("layer_norm: scale " + shape_string(scale_param.shape()) + " for input " + shape_string(xs));
  }
  const std::size_t rows = D == 0 ? 0 : x.numel() / D;
  const auto xd = x.data();
  const auto sd = scale_param.data();
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * D;
    T mu = 0;
    for (std::size_t i = 0; i < D; ++i) mu += row[i];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(D);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    for (std::size_t i = 0; i < D; ++i) {
      const T h = (row[i] - mu) * rs;
      xhat[r * D + i] = h;
      out[r * D + i] = h * sd[i];
    }
  }
  BasicTensor<T> result(xs, std::move(out));
  if (auto* tape = recording({&x, &scale_param})) {
    result.set_requires_grad(true);
    tape->record("layer_norm", {x, scale_param}, result,
                 [x, scale_param, result, xhat = std::move(xhat), rstd = std::move(rstd), rows, D] {
                   const auto g = result.grad();
                   const auto sd = scale_param.data();
                   if (scale_param.requires_grad()) {
                     auto gs = scale_param.grad_accumulator();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t i = 0; i < D; ++i) gs[i] += g[r * D + i] * xhat[r * D + i];
                   }
                   if (x.requires_grad()) {
                     auto gx = x.grad_accumulator();
                     std::vector<T> dh(D);
                     for (std::size_t r = 0; r < rows; ++r) {
                       T mean_dh = 0, mean_dh_h = 0;
                       for (std::size_t i = 0; i < D; ++i) {
                         dh[i] = g[r * D + i] * sd[i];
                         mean_dh += dh[i];
                         mean_dh_h += dh[i] * xhat[r * D + i];
                       }
                       mean_dh /= static_cast<T>(D);
                       mean_dh_h /= static_cast<T>(D);
                       for (std::size_t i = 0; i < D; ++i) {
                         gx[r * D + i] += rstd[r] * (dh[i] - mean_dh - xhat[r * D + i] * mean_dh_h);
                       }
                     }
                   }
                 });
  }
  return result;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using CArrMap = Eigen::Map<const Arr>;
  const T c = static_cast<T>(kSqrt2OverPi);
  const T k = static_cast<T>(kGeluCoeff);
  const auto n = static_cast<Eigen::Index>(x.numel());
  CArrMap v(x.data().data(), n);
  // tanh(c (v + k v^3)) is kept for the backward pass.
  auto th = std::make_shared<Arr>((c * (v + k * v.cube())).tanh());
  std::vector<T> out(x.numel());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * v * (T(1) + *th);
  BasicTensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("gelu", {x}, result, [x, result, c, k, th, n] {
      CArrMap g(result.grad().data(), n);
      CArrMap v(x.data().data(), n);
      Eigen::Map<Arr> gx(x.grad_accumulator().data(), n);
      const auto& t = *th;
      gx += g * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * c * (T(1) + T(3) * k * v.square()));
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const BasicTensor<T>& mask) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const Shape& vs = v.shape();
  const std::size_t rank = qs.size();
  if (rank < 2 || ks.size() != rank || vs.size() != rank) throw ShapeError("attention: rank mismatch");
  if (!std::equal(qs.begin(), qs.end() - 2, ks.begin()) || !std::equal(qs.begin(), qs.end() - 2, vs.begin())) {
    throw ShapeError("attention: batch extents differ");
  }
  const std::size_t N = qs[rank - 2], d = qs.back();
  const std::size_t M = ks[rank - 2];
  const std::size_t dv = vs.back();
  if (ks.back() != d) throw ShapeError("attention: head dims differ " + shape_string(qs) + " vs " + shape_string(ks));
  if (vs[rank - 2] != M) throw ShapeError("attention: key/value lengths differ");
  const std::size_t G = (N * d == 0) ? 0 : q.numel() / (N * d);

  std::size_t mask_groups = 0;  // 0: no mask
  std::size_t per_mask = 1;
  if (mask.defined()) {
    const Shape& ms = mask.shape();
    if (ms.size() < 2 || ms[ms.size() - 2] != N || ms.back() != M) {
      throw ShapeError("attention: mask " + shape_string(ms) + " for scores [" + std::to_string(N) + "," +
                       std::to_string(M) + "]");
    }
    mask_groups = mask.numel() / (N * M);
    if (mask_groups == 0 || G % mask_groups != 0) throw ShapeError("attention: mask batch does not divide batch");
    per_mask = G / mask_groups;
  }

  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  const auto iN = static_cast<Eigen::Index>(N), iM = static_cast<Eigen::Index>(M),
             id = static_cast<Eigen::Index>(d), idv = static_cast<Eigen::Index>(dv);
  std::vector<T> probs(G * N * M);
  std::vector<T> out(G * N * dv);
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  const T* pm = mask.defined() ? mask.data().data() : nullptr;
  for (std::size_t g = 0; g < G; ++g) {
    T* P = probs.data() + g * N * M;
    MutMap<T> S(P, iN, iM);
    S.noalias() = ConstMap<T>(pq + g * N * d, iN, id) * ConstMap<T>(pk + g * M * d, iM, id).transpose();
    S *= sc;
    if (pm) S += ConstMap<T>(pm + (g / per_mask) * N * M, iN, iM);
    for (std::size_t i = 0; i < N; ++i) {
      T* row = P + i * M;
      T mx = row[0];
      for (std::size_t j = 1; j < M; ++j) mx = std::max(mx, row[j]);
      T z = 0;
      for (std::size_t j = 0; j < M; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < M; ++j) row[j] *= inv;
    }
    MutMap<T>(out.data() + g * N * dv, iN, idv).noalias() = S * ConstMap<T>(pv + g * M * dv, iM, idv);
  }
  Shape out_shape = qs;
  out_shape.back() = dv;
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording({&q, &k, &v})) {
    result.set_requires_grad(true);
    tape->record("attention", {q, k, v}, result, [q, k, v, result, probs = std::move(probs), G, N, M, d, dv, sc] {
      const auto iN = static_cast<Eigen::Index>(N), iM = static_cast<Eigen::Index>(M),
                 id = static_cast<Eigen::Index>(d), idv = static_cast<Eigen::Index>(dv);
      const T* pq = q.data().data();
      const T* pk = k.data().data();
      const T* pv = v.data().data();
      const T* pg = result.grad().data();
      T* gq = q.requires_grad() ? q.grad_accumulator().data() : nullptr;
      T* gk = k.requires_grad() ? k.grad_accumulator().data() : nullptr;
      T* gv = v.requires_grad() ? v.grad_accumulator().data() : nullptr;
      RowMat<T> dP(iN, iM);
      for (std::size_t g = 0; g < G; ++g) {
        ConstMap<T> P(probs.data() + g * N * M, iN, iM);
        ConstMap<T> dO(pg + g * N * dv, iN, idv);
        if (gv) MutMap<T>(gv + g * M * dv, iM, idv).noalias() += P.transpose() * dO;
        if (!gq && !gk) continue;
        dP.noalias() = dO * ConstMap<T>(pv + g * M * dv, iM, idv).transpose();
        for (std::size_t i = 0; i < N; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < M; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < M; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
        }
        if (gq) MutMap<T>(gq + g * N * d, iN, id).noalias() += dP * ConstMap<T>(pk + g * M * d, iM, id);
        if (gk) MutMap<T>(gk + g * M * d, iM, id).noalias() += dP.transpose() * ConstMap<T>(pq + g * N * d, iN, id);
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::span<const T> weights) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy: logits must be [R,V], got " + shape_string(logits.shape()));
  const std::size_t R = logits.size(0), V = logits.size(1);
  if (targets.size() != R || weights.size() != R) throw ShapeError("cross_entropy: targets/weights length mismatch");
  T wsum = 0;
  for (auto w : weights) wsum += w;
  if (!(wsum > 0)) throw EmptyLossError("cross_entropy: weight mask has no active position");
  const auto ld = logits.data();
  std::vector<T> probs(R * V, T(0));
  T total = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (weights[r] == T(0)) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw ShapeError("cross_entropy: target out of range");
    const T* row = ld.data() + r * V;
    T mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < V; ++j) {
      probs[r * V + j] = std::exp(row[j] - mx);
      z += probs[r * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= z;
    total += weights[r] * (std::log(z) + mx - row[t]);
  }
  BasicTensor<T> result = BasicTensor<T>::scalar(total / wsum);
  if (auto* tape = recording({&logits})) {
    result.set_requires_grad(true);
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<T> wt(weights.begin(), weights.end());
    tape->record("cross_entropy", {logits}, result,
                 [logits, result, probs = std::move(probs), tg = std::move(tg), wt = std::move(wt), R, V, wsum] {
                   const T g = result.grad()[0] / wsum;
                   auto gl = logits.grad_accumulator();
                   for (std::size_t r = 0; r < R; ++r) {
                     if (wt[r] == T(0)) continue;
                     const T f = g * wt[r];
                     for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += f * probs[r * V + j];
                     gl[r * V + static_cast<std::size_t>(tg[r])] -= f;
                   }
                 });
  }
  return result;
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids, const Shape& prefix) {
  if (table.dim() != 2) throw ShapeError("embedding: table must be [V,D]");
  if (shape_numel(prefix) != ids.size()) throw ShapeError("embedding: prefix does not match id count");
  const std::size_t V = table.size(0), D = table.size(1);
  const auto td = table.data();
  std::vector<T> out(ids.size() * D);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(V));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * D, D, out.data() + i * D);
  }
  Shape out_shape = prefix;
  out_shape.push_back(D);
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording({&table})) {
    result.set_requires_grad(true);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    tape->record("embedding", {table}, result, [table, result, idv = std::move(idv), D] {
      const auto g = result.grad();
      auto gt = table.grad_accumulator();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * D;
        for (std::size_t j = 0; j < D; ++j) dst[j] += g[i * D + j];
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.dim() == 0) throw ShapeError("softmax: rank 0 input");
  const std::size_t D = x.shape().back();
  const std::size_t rows = D == 0 ? 0 : x.numel() / D;
  const auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * D;
    T* o = out.data() + r * D;
    T mx = row[0];
    for (std::size_t j = 1; j < D; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < D; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < D; ++j) o[j] /= z;
  }
  BasicTensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("softmax", {x}, result, [x, result, rows, D] {
      const auto g = result.grad();
      const auto y = result.data();
      auto gx = x.grad_accumulator();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < D; ++j) dot += g[r * D + j] * y[r * D + j];
        for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += y[r * D + j] * (g[r * D + j] - dot);
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, int axis0, int axis1) {
  const Shape& xs = x.shape();
  std::size_t a0 = normalize_axis(axis0, xs.size(), "transpose");
  std::size_t a1 = normalize_axis(axis1, xs.size(), "transpose");
  if (a0 == a1) return reshape(x, xs);
  if (a0 > a1) std::swap(a0, a1);
  Shape out_shape = xs;
  std::swap(out_shape[a0], out_shape[a1]);
  std::vector<T> out(x.numel());
  swap_axes_copy<T>(x.data(), xs, a0, a1, out, false);
  BasicTensor<T> result(out_shape, std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("transpose", {x}, result, [x, result, out_shape, a0, a1] {
      swap_axes_copy<T>(result.grad(), out_shape, a0, a1, x.grad_accumulator(), true);
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  BasicTensor<T> result(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("reshape", {x}, result, [x, result] {
      const auto g = result.grad();
      auto gx = x.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  BasicTensor<T> result = BasicTensor<T>::scalar(acc);
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("sum", {x}, result, [x, result] {
      const T g = result.grad()[0];
      for (auto& v : x.grad_accumulator()) v += g;
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, int axis) {
  const Shape& xs = x.shape();
  const std::size_t a = normalize_axis(axis, xs.size(), "mean_axis");
  const AxisSplit sp = split_at(xs, a);
  if (sp.extent == 0) throw ShapeError("mean_axis: empty axis");
  const auto xd = x.data();
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const T inv = T(1) / static_cast<T>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.extent + e) * sp.inner + i];
  for (auto& v : out) v *= inv;
  Shape out_shape = xs;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(a));
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("mean_axis", {x}, result, [x, result, sp, inv] {
      const auto g = result.grad();
      auto gx = x.grad_accumulator();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < sp.extent; ++e)
          for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must lie in [0,1)");
  if (rate == 0.0) return x;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = keep(rng) ? factor : T(0);
  return mul(x, BasicTensor<T>(x.shape(), std::move(m)));
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t a = normalize_axis(axis, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[a] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != a && s[i] != s0[i]) throw ShapeError("concat: extents differ off the concat axis");
    }
    out_shape[a] += s[a];
  }
  const AxisSplit out_sp = split_at(out_shape, a);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisSplit sp = split_at(p.shape(), a);
    const auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pd.data() + o * sp.extent * sp.inner, sp.extent * sp.inner,
                  out.data() + (o * out_sp.extent + offset) * out_sp.inner);
    }
    offset += sp.extent;
  }
  BasicTensor<T> result(out_shape, std::move(out));
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    result.set_requires_grad(true);
    tape->record("concat", parts, result, [parts, result, offsets, out_sp, a] {
      const auto g = result.grad();
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        if (!parts[pi].requires_grad()) continue;
        const AxisSplit sp = split_at(parts[pi].shape(), a);
        auto gp = parts[pi].grad_accumulator();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * out_sp.extent + offsets[pi]) * out_sp.inner;
          T* dst = gp.data() + o * sp.extent * sp.inner;
          for (std::size_t i = 0; i < sp.extent * sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const Shape& xs = x.shape();
  const std::size_t a = normalize_axis(axis, xs.size(), "slice");
  if (start + length > xs[a]) throw ShapeError("slice: range exceeds extent of " + shape_string(xs));
  const AxisSplit sp = split_at(xs, a);
  Shape out_shape = xs;
  out_shape[a] = length;
  std::vector<T> out(sp.outer * length * sp.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xd.data() + (o * sp.extent + start) * sp.inner, length * sp.inner, out.data() + o * length * sp.inner);
  }
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("slice", {x}, result, [x, result, sp, start, length] {
      const auto g = result.grad();
      auto gx = x.grad_accumulator();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        T* dst = gx.data() + (o * sp.extent + start) * sp.inner;
        const T* src = g.data() + o * length * sp.inner;
        for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
  if (x.dim() == 0) throw ShapeError("l2_normalize: rank 0 input");
  const std::size_t D = x.shape().back();
  const std::size_t rows = D == 0 ? 0 : x.numel() / D;
  const auto xd = x.data();
  std::vector<T> out(x.numel()), inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < D; ++j) ss += xd[r * D + j] * xd[r * D + j];
    inv_norm[r] = T(1) / std::sqrt(ss + T(1e-12));
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xd[r * D + j] * inv_norm[r];
  }
  BasicTensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording({&x})) {
    result.set_requires_grad(true);
    tape->record("l2_normalize", {x}, result, [x, result, inv_norm = std::move(inv_norm), rows, D] {
      const auto g = result.grad();
      const auto y = result.data();
      auto gx = x.grad_accumulator();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < D; ++j) dot += g[r * D + j] * y[r * D + j];
        for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += (g[r * D + j] - y[r * D + j] * dot) * inv_norm[r];
      }
    });
  }
  return result;
}

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  const auto xd = x.data();
  std::vector<To> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = static_cast<To>(xd[i]);
  return BasicTensor<To>(x.shape(), std::move(out));
}

#define CAPPA_INSTANTIATE_OPS(T)                                                                             \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                               \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                    const BasicTensor<T>&);                                                   \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,                 \
                                        std::span<const T>);                                                  \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const std::int32_t>, const Shape&);      \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> transpose(const BasicTensor<T>&, int, int);                                         \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                              \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, int);                                              \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, std::uint64_t);                              \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                    \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t, std::size_t);                        \
  template BasicTensor<T> l2_normalize(const BasicTensor<T>&);

CAPPA_INSTANTIATE_OPS(float)
CAPPA_INSTANTIATE_OPS(double)
#undef CAPPA_INSTANTIATE_OPS

template BasicTensor<double> cast<double, float>(const BasicTensor<float>&);
template BasicTensor<float> cast<float, double>(const BasicTensor<double>&);
template BasicTensor<float> cast<float, float>(const BasicTensor<float>&);
template BasicTensor<double> cast<double, double>(const BasicTensor<double>&);

}  // namespace cappa
