#include "cappa/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace cappa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!impl_) throw ShapeError("tensor: undefined");
  return impl_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::size(int axis) const {
  const auto& s = shape();
  const int rank = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("tensor: axis out of range for " + shape_string(s));
  return s[static_cast<std::size_t>(a)];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return impl_ ? impl_->data.size() : 0;
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  if (!impl_) throw ShapeError("tensor: undefined");
  return impl_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!impl_) throw ShapeError("tensor: undefined");
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on " + shape_string(shape()));
  return impl_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  if (!impl_) throw ShapeError("tensor: undefined");
  impl_->requires_grad = flag;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!impl_) throw ShapeError("tensor: undefined");
  return impl_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::grad_accumulator() const {
  if (!impl_) throw ShapeError("tensor: undefined");
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  if (!impl_) return {};
  return BasicTensor(impl_->shape, impl_->data, impl_->requires_grad);
}

// ---------------------------------------------------------------------------

template <typename T>
void Tape<T>::record(const char* op, std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
                     std::function<void()> backward) {
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must have one element");
  loss.grad_accumulator()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

namespace {
template <typename T>
Tape<T>*& tape_slot() noexcept {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tape<T>* active_tape() noexcept {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(tape_slot<T>()) {
  tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  tape_slot<T>() = previous_;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template Tape<float>* active_tape<float>() noexcept;
template Tape<double>* active_tape<double>() noexcept;

}  // namespace cappa
