#pragma once

// Tape-free reverse mode: every Var owns a node that remembers its inputs and a closure
// that pushes the node's gradient into them. backward() walks the graph in reverse
// topological order from a root.

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmseg/ops.hpp"
#include "mmseg/tensor.hpp"

namespace mmseg {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor<Scalar>& g) {
    if (!requires_grad) return;
    if (g.shape() != value.shape())
      throw ShapeError("gradient for '" + op + "' has shape " + shape_str(g.shape()) +
                       ", primal has " + shape_str(value.shape()));
    if (grad.empty())
      grad = g;
    else
      grad.array() += g.array();
  }
  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// A value that gradients never flow into.
  static Var constant(Tensor<Scalar> value, std::string name = "constant") {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->op = std::move(name);
    return Var(std::move(n));
  }

  /// A trainable input; its gradient is kept after backward().
  static Var leaf(Tensor<Scalar> value, std::string name = "leaf") {
    Var v = constant(std::move(value), std::move(name));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const std::string& op() const { return node_->op; }

  /// Gradient accumulated by backward(); zeros if nothing reached this node.
  Tensor<Scalar> grad() const {
    return node_->grad.empty() ? Tensor<Scalar>::zeros_like(node_->value) : node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Wraps a forward result; `backward` runs only when some input needs a gradient.
template <typename Scalar>
Var<Scalar> make_op(std::string name, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                    std::function<void(Node<Scalar>&)> backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = std::move(name);
  n->inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    n->inputs.push_back(in.node());
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Var<Scalar>(std::move(n));
}

/// Seeds `root` with `seed` (ones if empty) and propagates to every reachable leaf.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed = {}) {
  if (!root.requires_grad()) return;
  using NodeT = Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(seed.empty() ? Tensor<Scalar>(root.shape(), Scalar(1)) : seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // intermediate gradients are not needed once they have been propagated
  for (NodeT* node : order)
    if (node->backward) node->grad = Tensor<Scalar>();
}

/// Hands out one Var per parameter tensor (keyed by address) so gradients can be read
/// back per tensor after backward(). With tracking off, parameters enter as constants.
template <typename Scalar>
class ParamBinder {
 public:
  explicit ParamBinder(bool track_grads = true) : track_grads_(track_grads) {}

  Var<Scalar> operator()(const Tensor<Scalar>& param) {
    if (param.empty()) return {};
    auto it = vars_.find(&param);
    if (it != vars_.end()) return it->second;
    Var<Scalar> v = track_grads_ ? Var<Scalar>::leaf(param, "param") : Var<Scalar>::constant(param, "param");
    vars_.emplace(&param, v);
    return v;
  }

  /// Routes `param` to an existing Var instead of a fresh leaf.
  void preset(const Tensor<Scalar>& param, Var<Scalar> var) { vars_[&param] = std::move(var); }

  /// Gradient for a bound tensor; zeros for tensors the graph never touched.
  Tensor<Scalar> grad_of(const Tensor<Scalar>& param) const {
    auto it = vars_.find(&param);
    return it == vars_.end() ? Tensor<Scalar>::zeros_like(param) : it->second.grad();
  }

  bool tracking() const { return track_grads_; }

 private:
  bool track_grads_;
  std::unordered_map<const Tensor<Scalar>*, Var<Scalar>> vars_;
};

// ---------------------------------------------------------------------------
// differentiable wrappers of the kernels in ops.hpp

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>& bias, Padding padding) {
  const Tensor<Scalar> no_bias;
  Tensor<Scalar> y = conv2d(x.value(), kernel.value(), bias.defined() ? bias.value() : no_bias, padding);
  return make_op<Scalar>("conv2d", std::move(y), {x, kernel, bias}, [padding](Node<Scalar>& n) {
    auto g = conv2d_backward(n.inputs[0]->value, n.inputs[1]->value, n.input_needs_grad(2), n.grad, padding);
    n.inputs[0]->accumulate(g.input);
    n.inputs[1]->accumulate(g.kernel);
    if (n.input_needs_grad(2)) n.inputs[2]->accumulate(g.bias);
  });
}

template <typename Scalar>
Var<Scalar> conv_transpose2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                             Index stride = 2) {
  const Tensor<Scalar> no_bias;
  Tensor<Scalar> y = conv_transpose2d(x.value(), kernel.value(), bias.defined() ? bias.value() : no_bias, stride);
  return make_op<Scalar>("conv_transpose2d", std::move(y), {x, kernel, bias}, [stride](Node<Scalar>& n) {
    auto g = conv_transpose2d_backward(n.inputs[0]->value, n.inputs[1]->value, n.input_needs_grad(2), n.grad, stride);
    n.inputs[0]->accumulate(g.input);
    n.inputs[1]->accumulate(g.kernel);
    if (n.input_needs_grad(2)) n.inputs[2]->accumulate(g.bias);
  });
}

template <typename Scalar>
Var<Scalar> maxpool2x2(const Var<Scalar>& x) {
  auto pooled = maxpool2x2(x.value());
  return make_op<Scalar>("maxpool2x2", std::move(pooled.output), {x},
                         [argmax = std::move(pooled.argmax)](Node<Scalar>& n) {
                           n.inputs[0]->accumulate(maxpool2x2_backward(n.inputs[0]->value.shape(), argmax, n.grad));
                         });
}

/// Batch norm with learnable scale/shift. In train mode the batch statistics are folded
/// into `*running` when it is non-null.
template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& x, const Var<Scalar>& scale, const Var<Scalar>& shift,
                      const BatchNormParams<Scalar>& stats, Mode mode, BatchNormParams<Scalar>* running = nullptr) {
  auto cache = std::make_shared<BatchNormCache<Scalar>>();
  Tensor<Scalar> y = batchnorm_forward(x.value(), scale.value(), shift.value(), stats, mode, *cache);
  if (mode == Mode::train && running)
    update_running_stats(*running, cache->mean, cache->var, x.value().dim(0) * x.value().dim(2) * x.value().dim(3));
  return make_op<Scalar>("batchnorm", std::move(y), {x, scale, shift}, [cache](Node<Scalar>& n) {
    auto g = batchnorm_backward(n.grad, n.inputs[1]->value, *cache);
    n.inputs[0]->accumulate(g.input);
    n.inputs[1]->accumulate(g.scale);
    n.inputs[2]->accumulate(g.shift);
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return make_op<Scalar>("relu", relu(x.value()), {x}, [](Node<Scalar>& n) {
    n.inputs[0]->accumulate(relu_backward(n.inputs[0]->value, n.grad));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return make_op<Scalar>("sigmoid", sigmoid(x.value()), {x}, [](Node<Scalar>& n) {
    n.inputs[0]->accumulate(sigmoid_backward(n.value, n.grad));
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  return make_op<Scalar>("tanh", tanh(x.value()), {x}, [](Node<Scalar>& n) {
    n.inputs[0]->accumulate(tanh_backward(n.value, n.grad));
  });
}

template <typename Scalar>
Var<Scalar> elementwise_mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_op<Scalar>("mul", elementwise_mul(a.value(), b.value()), {a, b}, [](Node<Scalar>& n) {
    if (n.input_needs_grad(0)) n.inputs[0]->accumulate(Tensor<Scalar>(n.grad.shape(), n.grad.array() * n.inputs[1]->value.array()));
    if (n.input_needs_grad(1)) n.inputs[1]->accumulate(Tensor<Scalar>(n.grad.shape(), n.grad.array() * n.inputs[0]->value.array()));
  });
}

template <typename Scalar>
Var<Scalar> elementwise_add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return make_op<Scalar>("add", elementwise_add(a.value(), b.value()), {a, b}, [](Node<Scalar>& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise_mul(a, b);
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise_add(a, b);
}

template <typename Scalar>
Var<Scalar> narrow_leading(const Var<Scalar>& x, Index first, Index count) {
  return make_op<Scalar>("narrow", narrow_leading(x.value(), first, count), {x}, [first](Node<Scalar>& n) {
    Tensor<Scalar> g = Tensor<Scalar>::zeros_like(n.inputs[0]->value);
    g.array().segment(first * (g.size() / g.dim(0)), n.grad.size()) = n.grad.array();
    n.inputs[0]->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> concat_leading(const std::vector<Var<Scalar>>& parts) {
  std::vector<Tensor<Scalar>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  return make_op<Scalar>("concat", concat_leading(values), parts, [](Node<Scalar>& n) {
    Index off = 0;
    for (auto& in : n.inputs) {
      const Index len = in->value.size();
      if (in->requires_grad) in->accumulate(Tensor<Scalar>(in->value.shape(), n.grad.array().segment(off, len)));
      off += len;
    }
  });
}

/// Scalar loss (shape [1]); the softmax probabilities are written to `probabilities` if given.
template <typename Scalar>
Var<Scalar> softmax_ce_loss(const Var<Scalar>& logits, const LabelTensor& labels, const Tensor<Scalar>& class_weights,
                            Tensor<Scalar>* probabilities = nullptr) {
  auto r = softmax_ce_loss(logits.value(), labels, class_weights);
  if (probabilities) *probabilities = r.probabilities;
  auto probs = std::make_shared<Tensor<Scalar>>(std::move(r.probabilities));
  return make_op<Scalar>("softmax_ce", Tensor<Scalar>({1}, {r.loss}), {logits},
                         [probs, labels, class_weights](Node<Scalar>& n) {
                           n.inputs[0]->accumulate(softmax_ce_backward(*probs, labels, class_weights, n.grad[0]));
                         });
}

}  // namespace mmseg
