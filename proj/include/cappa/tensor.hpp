#pragma once

// Minimal reverse-mode autodiff tensor.
//
// Tensors are shared handles to a contiguous row-major buffer. Operations are
// free functions; when a Tape is active on the calling thread and any input
// requires a gradient, the operation records a backward closure on that tape.
// Without an active tape nothing is recorded, which is how inference and
// frozen feature extraction run.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cappa/errors.hpp"

namespace cappa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  /// Extent of `axis`; negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  /// Direct write access, for initialization and optimizer updates only.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const T> grad() const;
  /// Gradient accumulator, allocated (zero-filled) on first access.
  std::span<T> grad_accumulator() const;
  void zero_grad();

  /// Deep copy without gradient state.
  BasicTensor clone() const;

  bool same_storage(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    mutable std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Ordered record of differentiable operations. Nodes are appended in
/// creation order, so the list is topologically sorted by construction and
/// backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    std::function<void()> backward;
  };

  void record(const char* op, std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
Tape<T>* active_tape() noexcept;

/// Makes `tape` the recording tape of the current thread for its lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for its lifetime (frozen forward passes).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// ---------------------------------------------------------------------------
// Operations. Unless noted, `b` may have a shape equal to a trailing suffix of
// `a`'s shape and is broadcast over the leading dimensions; nothing else
// broadcasts.

/// [..,m,k] x [..,k,n] -> [..,m,n]. `b` is either rank 2 (shared by every
/// batch entry) or has the same batch extents as `a`.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);

/// `a` times a single-element tensor `s`; differentiable in both.
template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, const BasicTensor<T>& s);

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a);

/// Scale-only layer normalization over the last dimension, epsilon 1e-6.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& scale);

inline constexpr double kLayerNormEps = 1e-6;

/// GELU, tanh approximation:
///   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

inline constexpr double kGeluCoeff = 0.044715;
inline constexpr double kSqrt2OverPi = 0.79788456080286535588;

/// Value used in additive attention masks for blocked positions.
inline constexpr double kMaskedOut = -1e9;

/// Scaled dot-product attention softmax(q k^T / sqrt(d) + mask) v.
///
/// q: [..,N,d], k: [..,M,d], v: [..,M,dv] with identical leading extents.
/// `mask` is optional and additive: either [N,M], shared by every batch
/// entry, or [P,N,M] where P divides the flattened batch count G and entry g
/// uses mask g / (G/P). This lets a per-example mask [B,N,M] serve a
/// [B,H,N,d] multi-head layout.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const BasicTensor<T>& mask = {});

/// Mean over rows with weight 1 of -log softmax(logits)[target].
/// logits: [R,V]; targets and weights have R entries; weights are 0 or 1.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::span<const T> weights);

/// Rows of `table` gathered by `ids`; result shape is prefix + [D].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids, const Shape& prefix);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, int axis0, int axis1);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

/// Mean over one axis; the axis is removed from the shape.
template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, int axis);

/// Inverted dropout with a mask drawn from `seed`. Training only.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, std::uint64_t seed);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length);

/// x / sqrt(sum(x^2) + 1e-12) over the last dimension.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x);

/// Element type conversion; not differentiable.
template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x);

}  // namespace cappa
