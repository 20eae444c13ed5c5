#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace airseg::nn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorImpl;

/// Backward rule of one op: reads out.grad and accumulates into the inputs' grads.
template <typename T>
struct GradNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;

  /// True when gradient must flow into this tensor.
  bool tracked() const { return requires_grad || node != nullptr; }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Row-major N-d array with shared storage and an optional reverse-mode graph.
/// Copies share the same storage (like a handle); use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : impl_(std::make_shared<TensorImpl<T>>()) {}
  explicit BasicTensor(Shape shape, T fill = T(0)) : BasicTensor() {
    impl_->data.assign(nn::numel(shape), fill);
    impl_->shape = std::move(shape);
  }
  BasicTensor(Shape shape, std::vector<T> data) : BasicTensor() {
    if (data.size() != nn::numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  bool empty() const { return impl_->shape.empty() && impl_->data.empty(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const {
    if (impl_->data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  /// Empty span if no gradient has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool tracked() const { return impl_->tracked(); }

  BasicTensor clone() const { return BasicTensor(shape(), std::vector<T>(impl_->data)); }
  /// Same data, no graph history.
  BasicTensor detach() const { return clone(); }

  /// Reverse-mode accumulation from this scalar into every reachable tensor.
  void backward() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// Builds an op result. If grad mode is on and any input is tracked, attaches
/// `backward` so that backward() can route gradients to the inputs.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::vector<BasicTensor<T>> inputs,
                           std::function<void(const TensorImpl<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.tracked();
  if (!any) return out;
  auto node = std::make_shared<GradNode<T>>();
  for (auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  return out;
}

/// A named trainable tensor.
template <typename T>
struct BasicParam {
  std::string name;
  BasicTensor<T> tensor;
};

using Param = BasicParam<float>;

}  // namespace airseg::nn
