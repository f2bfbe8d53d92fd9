#pragma once

#include <unordered_map>
#include <vector>

#include "ldpet/tensor.hpp"

namespace ldpet {

/// Gradients keyed by tensor identity (not value).
template <typename T>
class GradientMap {
 public:
  bool contains(const Tensor<T>& param) const { return grads_.count(param.id()) != 0; }
  const Tensor<T>& at(const Tensor<T>& param) const;
  void set(const Tensor<T>& param, Tensor<T> grad) { grads_[param.id()] = std::move(grad); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const TensorImpl<T>*, Tensor<T>> grads_;
};

struct BackwardOptions {
  /// Keep the graph's saved tensors so it can be differentiated again.
  bool retain_graph = false;
  /// Record the backward computation itself (double backprop). Implies retain_graph.
  bool create_graph = false;
};

/// Gradients of `output` with respect to each tensor in `wrt`, seeded with
/// `grad_output` (ones when undefined). Tensors not reachable from `output`
/// receive a zero gradient.
///
/// Graph policy: without retain_graph/create_graph the traversed nodes are
/// released afterwards and a second traversal throws.
template <typename T>
std::vector<Tensor<T>> gradients(const Tensor<T>& output, const std::vector<Tensor<T>>& wrt,
                                 const Tensor<T>& grad_output = {}, BackwardOptions options = {});

/// Reverse-mode gradient of a one-element tensor w.r.t. every listed parameter.
/// Unused parameters get a zero entry.
template <typename T>
GradientMap<T> backward(const Tensor<T>& scalar, const std::vector<Tensor<T>>& params,
                        BackwardOptions options = {});

/// d(scalar)/d(wrt) as a graph node: the result can itself be differentiated
/// with respect to anything `scalar` depended on (double backprop).
/// Throws when `wrt` does not influence `scalar`.
template <typename T>
Tensor<T> input_gradient_node(const Tensor<T>& scalar, const Tensor<T>& wrt);

}  // namespace ldpet
