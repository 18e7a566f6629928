#pragma once

// Tape-based reverse-mode differentiation. A Tape records one forward pass;
// backward() walks it once in reverse and deposits parameter gradients into
// the parameters' own gradient buffers, so several tapes (micro-batches) can
// accumulate into the same parameters before an optimizer step.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmoe/tensor.hpp"

namespace mmoe {

template <typename T>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  Buffer<T> adam_m;
  Buffer<T> adam_v;
  std::int64_t step_count = 0;
  bool decay = true;  // norm gains opt out of weight decay

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), adam_m(value.numel(), T{0}), adam_v(value.numel(), T{0}), decay(wd) {}
};

using Parameter = ParameterT<float>;

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const TensorT<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the tape and the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(TensorT<T> value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Leaf referencing a parameter in place; its value must outlive the tape.
  Var<T> param(ParameterT<T>& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(const char* op, TensorT<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(fn));
  }

  Var<T> record(const char* op, TensorT<T> value, std::span<const Var<T>> parents, BackwardFn fn) {
    check_not_consumed();
#ifndef NDEBUG
    if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
#endif
    Node n;
    n.owned = std::move(value);
    if (grad_enabled_) {
      for (const auto& p : parents) {
        if (p.tape() != this) throw std::logic_error(std::string(op) + ": operand recorded on a different tape");
        n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
      }
      if (n.requires_grad) n.backward = std::move(fn);
    }
    (void)op;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const TensorT<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id()); }

  // Gradient accumulator of a node, allocated on first touch. Parameter leaves
  // accumulate straight into the parameter's own buffer.
  std::span<T> grad(const Var<T>& v) {
    Node& n = nodes_.at(v.id());
    if (n.param) return n.param->value.grad();
    if (n.grad.empty()) n.grad.assign(value(v.id()).numel(), T{0});
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    if (consumed_) throw std::logic_error("backward called twice on one tape; reset() it first");
    if (!grad_enabled_) throw std::logic_error("backward on a tape recorded without gradients");
    if (loss.tape() != this) throw std::logic_error("loss was recorded on a different tape");
    if (value(loss.id()).numel() != 1) throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.param || n.grad.empty()) continue;
      if (n.backward) {
        Buffer<T> g = std::move(n.grad);
        n.backward(*this, g);
      }
      n.backward = nullptr;
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
    // Drop the graph; forward values stay readable until reset().
    for (auto& n : nodes_) {
      n.backward = nullptr;
      n.grad = {};
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    TensorT<T> owned;
    const TensorT<T>* ref = nullptr;
    ParameterT<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    Buffer<T> grad;
  };

  void check_not_consumed() const {
    if (consumed_) throw std::logic_error("recording onto a tape after backward; reset() it first");
  }

  std::deque<Node> nodes_;  // stable addresses while recording
  bool grad_enabled_;
  bool consumed_ = false;
};

}  // namespace mmoe
