#pragma once

// Reverse-mode differentiation. A Tape records every operation applied to
// Vars in execution order (which is a topological order of the DAG);
// backward() walks it in reverse, visiting each node once and summing
// gradients where a value fans out.

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "effmod/errors.hpp"
#include "effmod/tensor.hpp"

namespace effmod {

/// A learnable array with its accumulated gradient. An empty value means the
/// parameter is disabled (e.g. a bias on a bias-free layer).
template <class T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Shape s) : value(s), grad(s) {}

  bool present() const { return !value.empty(); }
  std::size_t size() const { return value.size(); }
  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <class T>
class Tape {
 public:
  /// Backward rule: receives the node's output gradient and pushes input
  /// gradients with accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  /// With record == false, no backward rules are stored (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf holding a copy of `value`.
  Var input(Tensor<T> value, bool requires_grad = true) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = record_ && requires_grad;
    return push_node(std::move(node));
  }

  Var constant(Tensor<T> value) { return input(std::move(value), false); }

  /// Leaf referencing a parameter; its gradient is added into p.grad by
  /// backward(). Returns an invalid Var for an absent parameter.
  Var param(Param<T>& p) {
    if (!p.present()) return Var{};
    Node node;
    node.ref = &p.value;
    node.param = &p;
    node.requires_grad = record_;
    return push_node(std::move(node));
  }

  /// Read-only parameter: referenced, never differentiated.
  Var param(const Param<T>& p) {
    if (!p.present()) return Var{};
    return view(p.value);
  }

  /// Leaf referencing a tensor owned elsewhere, never differentiated.
  Var view(const Tensor<T>& t) {
    Node node;
    node.ref = &t;
    return push_node(std::move(node));
  }

  const Tensor<T>& value(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }

  /// Gradient accumulated for v; zeros if nothing reached it.
  Tensor<T> grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }

  /// Records an op output. `fn` is dropped unless some input requires grad.
  Var record(Tensor<T> out, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node node;
    node.owned = std::move(out);
    if (record_) {
      for (Var in : inputs)
        if (requires_grad(in)) node.requires_grad = true;
      if (node.requires_grad) node.backward = std::move(fn);
    }
    return push_node(std::move(node));
  }

  /// Adds g into the gradient of v (no-op for constants and invalid Vars).
  void accumulate(Var v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    Node& n = nodes_[v.id];
    detail::require(g.shape() == value(v).shape(),
                    "autodiff: gradient shape " + to_string(g.shape()) + " does not match value " +
                        to_string(value(v).shape()));
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  /// Propagates `seed` (shaped like out's value) back through the tape and
  /// adds parameter gradients into their Param::grad.
  void backward(Var out, const Tensor<T>& seed) {
    check(out);
    detail::require(seed.shape() == value(out).shape(),
                    "backward: seed shape " + to_string(seed.shape()) + " != output shape " +
                        to_string(value(out).shape()));
    detail::require(record_, "backward: tape was not recording");
    accumulate(out, seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor<T>(n.param->value.shape());
        for (std::size_t j = 0; j < n.grad.size(); ++j) n.param->grad[j] += n.grad[j];
      }
    }
  }

  /// backward() for a single-element output with seed 1.
  void backward(Var out) {
    Tensor<T> seed(value(out).shape(), T(1));
    backward(out, seed);
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Param<T>* param = nullptr;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check(Var v) const {
    detail::require(v.valid() && v.id < nodes_.size(), "autodiff: invalid Var");
  }

  Var push_node(Node&& node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace effmod
