#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor {

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  Shape shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss, keyed by parameter name.
template <std::floating_point T>
struct GradientRecord {
  std::map<std::string, Tensor<T>> params;

  const Tensor<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ParameterError("no gradient recorded for '" + name + "'");
    return it->second;
  }
};

/**
 * Reverse-mode differentiation record. Operations append nodes in
 * evaluation order; backward() walks them in reverse once. Single owner.
 */
template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, {}); }

  /// Differentiable leaf that is not a named parameter (e.g. an input image).
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}, {}); }

  Var<T> parameter(const std::string& name, Tensor<T> value) {
    if (param_index_.count(name)) throw TapeError("parameter '" + name + "' registered twice");
    Var<T> v = push(std::move(value), true, {}, {});
    param_index_.emplace(name, v.id());
    return v;
  }

  /**
   * Appends the result of an operation. The node needs a gradient iff any
   * input does; otherwise `fn` is dropped.
   */
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_.at(i).requires_grad;
    if (!value.all_finite()) throw NumericalError("non-finite value produced on tape");
    return push(std::move(value), needs, std::move(inputs), needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Upstream gradient of a node (valid inside its backward function).
  const Tensor<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }

  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }

  /// Zero-initialised gradient accumulator for `id`, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward() with respect to `v` (zeros if unreached).
  Tensor<T> grad_of(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? n.grad : Tensor<T>(n.value.shape());
  }

  GradientRecord<T> backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw TapeError("loss was recorded on a different tape");
    if (consumed_) throw TapeError("backward() already ran on this tape; call reset() first");
    if (loss.value().size() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, id);
      if (!n.grad.all_finite()) throw NumericalError("non-finite gradient on tape node");
    }
    GradientRecord<T> rec;
    for (const auto& [name, id] : param_index_) rec.params.emplace(name, grad_of(Var<T>(this, id)));
    return rec;
  }

  void reset() {
    nodes_.clear();
    param_index_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs,
              BackwardFn fn) {
    if (consumed_) throw TapeError("tape already differentiated; call reset() before recording");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_index_;
  bool consumed_ = false;
};

}  // namespace capsfor
