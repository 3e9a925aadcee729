#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/diffcore/array.hpp"

namespace cisseg {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Records array operations in evaluation order and runs reverse-mode
/// differentiation over them.
///
/// A node requires a gradient iff it is a leaf marked so, or any of its inputs
/// does. Gradient buffers are allocated lazily and only for such nodes, and
/// `backward` walks the recorded nodes once, newest first. One tape belongs to
/// one thread; independent tapes may be used concurrently.
class Tape {
 public:
  // Receives the gradient of the node's output; must push gradients into the
  // node's inputs via `accumulate`.
  using BackwardFn = std::function<void(Tape&, const Array& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Array value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Array{}, requires_grad && grad_enabled_, false, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Array value) { return leaf(std::move(value), false); }

  /// Records the output of an operation. `backward` is dropped when no input
  /// requires a gradient.
  Var record(Array value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& in : inputs) {
        check_owned(in);
        needs = needs || nodes_[in.id].requires_grad;
      }
    }
    nodes_.push_back(Node{std::move(value), Array{}, needs, false,
                          needs ? std::move(backward) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Array& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }

  bool has_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].has_grad;
  }

  const Array& grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    if (!n.requires_grad) throw ArgumentError("gradient requested for a node that does not require one");
    if (!n.has_grad) throw ArgumentError("gradient not computed; call backward() first");
    return n.grad;
  }

  /// Adds `g` into the gradient of `v`; a no-op for nodes without requires_grad.
  void accumulate(Var v, const Array& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                       shape_string(n.value.shape()));
    }
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Direct access to a gradient buffer, zero-initialized on first use.
  /// Returns nullptr when `v` does not require a gradient.
  Array* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Array(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var loss) {
    check_owned(loss);
    if (!grad_enabled_) throw ArgumentError("backward() on a tape with gradients disabled");
    if (nodes_[loss.id].value.size() != 1) {
      throw ShapeError("backward() needs a scalar output, got " +
                       shape_string(nodes_[loss.id].value.shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    accumulate(loss, Array(nodes_[loss.id].value.shape(), 1.0));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      // Backward functions only touch older nodes, so `n` stays put.
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad;
    bool has_grad;
    BackwardFn backward;
  };

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw ArgumentError("variable does not belong to this tape");
    }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return tape->value(*this); }
inline bool Var::requires_grad() const { return tape->requires_grad(*this); }

}  // namespace cisseg
