#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ldpet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown for any violated operation precondition (shape mismatch, bad argument).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tensor;

/// One recorded operation in the computation graph. A node owns the input
/// handles it needs for its backward rule; the output tensor owns the node.
template <typename T>
struct Node {
  using BackwardFn = std::function<std::vector<Tensor<T>>(
      const Tensor<T>& grad_output, const std::vector<bool>& needs_input_grad)>;

  std::string op;
  std::vector<Tensor<T>> inputs;
  BackwardFn backward;
  bool released = false;

  void release() {
    inputs.clear();
    backward = nullptr;
    released = true;
  }
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
};

/// Dense row-major tensor handle with value storage and an optional link into
/// the active computation graph. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access. Only meaningful for leaves (parameters, inputs);
  /// mutating a tensor saved by a live graph invalidates that graph.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad || impl_->grad_fn != nullptr; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  Tensor& set_requires_grad(bool flag);
  const std::shared_ptr<Node<T>>& grad_fn() const { return impl_->grad_fn; }
  void set_grad_fn(std::shared_ptr<Node<T>> node) { impl_->grad_fn = std::move(node); }

  /// Copy of the values with no graph link and requires_grad off.
  Tensor detach() const;
  Tensor clone() const;

  const TensorImpl<T>* id() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Graph recording switch (thread-local). Ops record nodes only while enabled.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool flag);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool flag) : previous_(GradMode::enabled()) {
    GradMode::set_enabled(flag);
  }
  ~EnableGradGuard() { GradMode::set_enabled(previous_); }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// Attach `backward` to `out` when grad mode is on and any input takes part in a graph.
template <typename T>
Tensor<T> record(Tensor<T> out, std::string op, std::vector<Tensor<T>> inputs,
                 typename Node<T>::BackwardFn backward);

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace ldpet
