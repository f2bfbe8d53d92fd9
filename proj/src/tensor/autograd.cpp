#include "ldpet/autograd.hpp"

#include <unordered_set>

#include "ldpet/ops.hpp"

namespace ldpet {

template <typename T>
const Tensor<T>& GradientMap<T>::at(const Tensor<T>& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) {
    throw ShapeError("no gradient recorded for parameter of shape " + shape_str(param.shape()));
  }
  return it->second;
}

namespace {

template <typename T>
struct Traversal {
  std::vector<Node<T>*> postorder;  // inputs before consumers
  std::unordered_map<Node<T>*, bool> reaches;  // gradient must flow into this node's output
};

// Iterative post-order DFS over grad_fn links.
template <typename T>
std::vector<Node<T>*> postorder_nodes(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& in = node->inputs[next++];
      if (in.defined() && in.grad_fn()) {
        Node<T>* child = in.grad_fn().get();
        if (seen.insert(child).second) stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

template <typename T>
void accumulate(Tensor<T>& slot, const Tensor<T>& value) {
  slot = slot.defined() ? add(slot, value) : value;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> gradients(const Tensor<T>& output, const std::vector<Tensor<T>>& wrt,
                                 const Tensor<T>& grad_output, BackwardOptions options) {
  if (options.create_graph) options.retain_graph = true;
  std::vector<Tensor<T>> result(wrt.size());
  auto zero_fill = [&] {
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      if (!result[i].defined()) result[i] = Tensor<T>::zeros(wrt[i].shape());
    }
  };

  Tensor<T> seed = grad_output.defined() ? grad_output : Tensor<T>::ones(output.shape());
  if (seed.shape() != output.shape()) {
    throw ShapeError("gradients: seed shape " + shape_str(seed.shape()) +
                     " does not match output " + shape_str(output.shape()));
  }

  std::unordered_set<const TensorImpl<T>*> wrt_leaves;
  std::unordered_map<Node<T>*, std::size_t> wrt_nodes;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (wrt[i].is_leaf()) {
      wrt_leaves.insert(wrt[i].id());
      if (wrt[i].id() == output.id()) result[i] = seed;
    } else {
      wrt_nodes.emplace(wrt[i].grad_fn().get(), i);
    }
  }

  if (!output.grad_fn()) {
    zero_fill();
    return result;
  }

  Node<T>* root = output.grad_fn().get();
  if (root->released) {
    throw ShapeError("gradients: graph already consumed; use retain_graph to traverse it twice");
  }
  const auto order = postorder_nodes(root);

  std::unordered_map<Node<T>*, bool> reaches;
  for (Node<T>* node : order) {
    bool r = wrt_nodes.count(node) != 0;
    for (const auto& in : node->inputs) {
      if (!in.defined()) continue;
      if (in.grad_fn()) {
        r = r || reaches[in.grad_fn().get()];
      } else if (wrt_leaves.count(in.id())) {
        r = true;
      }
    }
    reaches[node] = r;
  }

  std::unordered_map<Node<T>*, Tensor<T>> node_grads;
  std::unordered_map<const TensorImpl<T>*, Tensor<T>> leaf_grads;
  node_grads[root] = seed;

  {
    EnableGradGuard mode(options.create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      auto found = node_grads.find(node);
      if (found == node_grads.end()) continue;
      if (node->released) {
        throw ShapeError("gradients: graph already consumed at op '" + node->op + "'");
      }
      Tensor<T> g = found->second;
      if (!wrt_nodes.count(node)) node_grads.erase(found);

      std::vector<bool> need(node->inputs.size(), false);
      bool any = false;
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const auto& in = node->inputs[i];
        if (!in.defined()) continue;
        need[i] = in.grad_fn() ? reaches[in.grad_fn().get()] : wrt_leaves.count(in.id()) != 0;
        any = any || need[i];
      }
      if (!any) continue;

      auto input_grads = node->backward(g, need);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        if (!need[i] || i >= input_grads.size() || !input_grads[i].defined()) continue;
        const auto& in = node->inputs[i];
        if (input_grads[i].shape() != in.shape()) {
          throw ShapeError("gradients: op '" + node->op + "' produced gradient " +
                           shape_str(input_grads[i].shape()) + " for input " +
                           shape_str(in.shape()));
        }
        if (in.grad_fn()) {
          accumulate(node_grads[in.grad_fn().get()], input_grads[i]);
        } else {
          accumulate(leaf_grads[in.id()], input_grads[i]);
        }
      }
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (result[i].defined()) continue;
    if (wrt[i].is_leaf()) {
      auto f = leaf_grads.find(wrt[i].id());
      if (f != leaf_grads.end()) result[i] = f->second;
    } else {
      auto f = node_grads.find(wrt[i].grad_fn().get());
      if (f != node_grads.end()) result[i] = f->second;
    }
  }

  if (!options.retain_graph) {
    for (Node<T>* node : order) node->release();
  }
  zero_fill();
  return result;
}

template <typename T>
GradientMap<T> backward(const Tensor<T>& scalar, const std::vector<Tensor<T>>& params,
                        BackwardOptions options) {
  if (scalar.numel() != 1) {
    throw ShapeError("backward: needs a one-element tensor, got " + shape_str(scalar.shape()));
  }
  auto grads = gradients(scalar, params, Tensor<T>{}, options);
  GradientMap<T> map;
  for (std::size_t i = 0; i < params.size(); ++i) map.set(params[i], std::move(grads[i]));
  return map;
}

template <typename T>
Tensor<T> input_gradient_node(const Tensor<T>& scalar, const Tensor<T>& wrt) {
  if (scalar.numel() != 1) {
    throw ShapeError("input_gradient_node: needs a one-element tensor, got " +
                     shape_str(scalar.shape()));
  }
  if (!scalar.grad_fn()) {
    throw ShapeError("input_gradient_node: output does not depend on the requested input");
  }
  // Reachability check before doing any work.
  bool reachable = false;
  for (Node<T>* node : postorder_nodes(scalar.grad_fn().get())) {
    if (!wrt.is_leaf() && node == wrt.grad_fn().get()) reachable = true;
    for (const auto& in : node->inputs) {
      if (in.defined() && in.id() == wrt.id()) reachable = true;
    }
  }
  if (!reachable) {
    throw ShapeError("input_gradient_node: output does not depend on the requested input");
  }
  BackwardOptions options;
  options.create_graph = true;
  return gradients(scalar, {wrt}, Tensor<T>{}, options).front();
}

template class GradientMap<float>;
template class GradientMap<double>;
template std::vector<Tensor<float>> gradients(const Tensor<float>&,
                                              const std::vector<Tensor<float>>&,
                                              const Tensor<float>&, BackwardOptions);
template std::vector<Tensor<double>> gradients(const Tensor<double>&,
                                               const std::vector<Tensor<double>>&,
                                               const Tensor<double>&, BackwardOptions);
template GradientMap<float> backward(const Tensor<float>&, const std::vector<Tensor<float>>&,
                                     BackwardOptions);
template GradientMap<double> backward(const Tensor<double>&, const std::vector<Tensor<double>>&,
                                      BackwardOptions);
template Tensor<float> input_gradient_node(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> input_gradient_node(const Tensor<double>&, const Tensor<double>&);

}  // namespace ldpet
