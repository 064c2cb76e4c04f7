#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <utility>

#include "tsdistill/ndgrad/tensor.hpp"

namespace tsdistill::ndgrad {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;

  bool valid() const noexcept { return id != npos; }
};

// Records the forward computation so gradients can be propagated in reverse.
//
// Node ids are assigned in execution order, which is a topological order of
// the graph; backward() walks ids downward and runs each node's closure at
// most once. Nodes live in a deque so references returned by value() stay
// valid while later ops are recorded.
template <typename T>
class Tape {
 public:
  // Receives the tape and the gradient of the node's output; accumulates into
  // the inputs via accumulate()/grad_slot().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, {}});
    return Var{nodes_.size() - 1};
  }

  // Used by ops. The closure is dropped when no input needs a gradient.
  Var record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    const bool rg = requires_grad && grad_enabled_;
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of v, or nullptr when none reached it.
  const Tensor<T>* grad(Var v) const {
    const auto& n = node(v);
    return n.has_grad ? &n.grad : nullptr;
  }

  // Zero-initialized on first access.
  Tensor<T>& grad_slot(Var v) {
    auto& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    auto& slot = grad_slot(v);
    require_shape(g, slot.shape(), "accumulate");
    auto dst = slot.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void backward(Var loss) {
    if (node(loss).value.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          to_string(node(loss).value.shape()));
    }
    if (!requires_grad(loss)) return;
    grad_slot(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    bool has_grad = false;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace tsdistill::ndgrad
