#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hiermusic/nn/tensor.hpp"

namespace hiermusic::nn {

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = value.zeros_like(); }
  bool has_grad() const { return grad.same_shape(value) && grad.size() == value.size(); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Every op appends a node holding its forward value and a
/// closure that maps the output gradient onto the input gradients. Values are
/// checked for finiteness as they are produced; the first offending node is
/// named in the thrown NumericError.
class Tape {
 public:
  /// gin[i] is null when input i does not require a gradient.
  using Backward = std::function<void(const Tensor& gout, std::span<Tensor* const> gin)>;

  bool training = false;
  std::mt19937_64 rng{0};

  Var constant(Tensor v, std::string name = "constant") {
    return push(std::move(name), std::move(v), {}, nullptr, nullptr, false);
  }

  Var param(Parameter& p, std::string name = "param") {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(std::move(name), p.value, {}, nullptr, &p, true);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var record(std::string op, Tensor value, std::vector<Var> inputs, Backward backward) {
    bool needs = false;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::logic_error(op + ": input recorded on another tape");
      ids.push_back(in.id());
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(op), std::move(value), std::move(ids), needs ? std::move(backward) : nullptr,
                nullptr, needs);
  }

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  const Tensor& grad(int id) const { return nodes_.at(id).grad; }
  const std::string& op_name(int id) const { return nodes_.at(id).op; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Back-propagates from a scalar loss and accumulates into Parameter::grad.
  void backward(Var loss) {
    Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(root.value.shape()) +
                       " from node #" + std::to_string(loss.id()) + " (" + root.op + ")");
    for (auto& n : nodes_) n.grad = Tensor();
    root.grad = root.value.zeros_like();
    root.grad[0] = 1.0;
    std::vector<Tensor*> gin;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (!n.grad.all_finite())
        throw NumericError("non-finite gradient at node #" + std::to_string(id) + " (" + n.op + ")");
      if (n.param != nullptr) {
        Parameter& p = *n.param;
        if (!p.has_grad()) p.zero_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
        continue;
      }
      if (!n.backward) continue;
      gin.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) continue;
        if (in.grad.size() == 0) in.grad = in.value.zeros_like();
        gin[k] = &in.grad;
      }
      n.backward(n.grad, gin);
    }
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(std::string op, Tensor value, std::vector<int> inputs, Backward backward, Parameter* param,
           bool requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    if (!value.all_finite())
      throw NumericError("non-finite value produced at node #" + std::to_string(id) + " (" + op + ")");
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor(), std::move(inputs),
                          std::move(backward), param, requires_grad});
    return Var(this, id);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

}  // namespace hiermusic::nn
