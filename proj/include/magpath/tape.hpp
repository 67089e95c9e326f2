#pragma once

#include <functional>
#include <vector>

#include "magpath/params.hpp"
#include "magpath/tensor.hpp"

namespace magpath::nn {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode gradient tape. Nodes are appended in execution order, so
/// reverse index order is a valid (and deterministic) replay order.
///
/// A tape is owned by one session and is not thread-safe.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient readable through grad().
  Var leaf(Tensor value);
  /// Leaf bound to a parameter. Frozen parameters are recorded as constants;
  /// gradients of trainable ones are added into Param::grad by backward().
  Var param(Param& p);

  /// Record an op result. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

  /// Seeds d(out)/d(out) = 1 for a single-element output.
  void backward(Var out);
  void backward(Var out, const Tensor& upstream);

  const Tensor& value(Var v) const;
  /// Gradient of a leaf or intermediate after backward(); zeros if none flowed.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;

  /// Add `g` into the gradient slot of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Param* param = nullptr;
    Backward backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

}  // namespace magpath::nn
