#include "magpath/tape.hpp"

namespace magpath::nn {

const Tensor& Var::value() const {
  if (!valid()) throw StateError("var: not bound to a tape");
  return tape->value(*this);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Param& p) {
  nodes_.push_back(Node{p.value, {}, p.trainable, p.trainable ? &p : nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  expect_finite(value, "tape");
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw StateError("tape: input recorded on a different tape");
    needs = needs || node(v).requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw StateError("tape: variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape*>(this)->node(v));
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    expect_shape(g, n.value.shape(), "gradient");
    n.grad = g;
  } else {
    n.grad.add_inplace(g);
  }
}

void Tape::backward(Var out) {
  const Node& n = node(out);
  if (n.value.size() != 1)
    throw ContractError("backward: implicit seed needs a single-element output, got " +
                        shape_str(n.value.shape()));
  backward(out, Tensor(n.value.shape(), 1.0));
}

void Tape::backward(Var out, const Tensor& upstream) {
  if (nodes_.empty() || out.tape != this)
    throw StateError("backward: nothing recorded on this tape (call forward first)");
  Node& root = node(out);
  expect_shape(upstream, root.value.shape(), "backward upstream");
  for (auto& nd : nodes_) nd.grad = Tensor();
  if (!root.requires_grad) return;
  root.grad = upstream;
  for (int i = out.id; i >= 0; --i) {
    Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (nd.grad.empty()) continue;
    if (nd.backward) {
      // Copy: the callback may grow grads of earlier nodes but never this one.
      const Tensor g = nd.grad;
      nd.backward(*this, g);
    }
    if (nd.param != nullptr) nd.param->grad.add_inplace(nd.grad);
  }
}

}  // namespace magpath::nn
