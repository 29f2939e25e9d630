#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "simplr/tensor.hpp"

namespace simplr {

class Tape;

// Handle into a tape. Cheap to copy; invalid until assigned.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// A named leaf that outlives any single tape: holds the value, the gradient
// accumulated across backward passes, and optimizer state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor moment1;
  Tensor moment2;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Tensor::zeros(value.shape)),
        moment1(Tensor::zeros(value.shape)),
        moment2(Tensor::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Reverse-mode tape. Ops append nodes via add_node with a closure that pulls
// the node's output gradient into its parents. Gradients only flow through
// nodes whose requires_grad flag is set, which propagates from leaves.
class Tape {
 public:
  Var constant(Tensor v) { return push(std::move(v), false, {}, nullptr, "constant"); }

  // Differentiable leaf not bound to a Parameter (finite-difference probes,
  // attention inputs under test).
  Var input(Tensor v) { return push(std::move(v), true, {}, nullptr, "input"); }

  // Differentiable leaf bound to `p`. Leasing the same Parameter twice on one
  // tape returns the same node so gradients accumulate in one place.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = push(p.value, true, {}, nullptr, "param:" + p.name);
    param_nodes_[&p] = v.id;
    bound_.push_back({&p, v.id});
    return v;
  }

  using Vjp = std::function<void(Tape&, int)>;

  // Low-level node construction for op implementations. Throws if the op
  // produced a non-finite value, naming the op.
  Var add_node(Tensor value, std::vector<int> parents, Vjp vjp, const char* op_name) {
    bool rg = false;
    for (int p : parents)
      if (node(p).requires_grad) rg = true;
    if (!value.all_finite())
      throw Error(std::string(op_name) + ": produced a non-finite value");
    return push(std::move(value), rg, std::move(parents), rg ? std::move(vjp) : nullptr, op_name);
  }

  const Tensor& val(Var v) const { return node_at(v).value; }

  // Gradient of the last backward() output w.r.t. this node. Zero tensor if
  // nothing flowed here.
  const Tensor& grad(Var v) const {
    const Node& n = node_at(v);
    if (n.grad.data.empty()) {
      static thread_local Tensor zero;
      zero = Tensor::zeros(n.value.shape);
      return zero;
    }
    return n.grad;
  }

  // Accumulation buffer for op VJPs; allocates on first touch.
  Tensor& grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Seeds d(out)/d(out) = 1 and sweeps the tape in reverse. `out` must be a
  // single-element tensor.
  void backward(Var out) {
    Node& root = node_at(out);
    if (root.value.numel() != 1)
      throw Error("backward: output must be a scalar, got " + shape_str(root.value.shape));
    for (Node& n : nodes_) n.grad.data.clear();
    grad_buffer(out.id).data[0] = 1.0;
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || !n.vjp) continue;
      if (n.grad.data.empty()) continue;
      n.vjp(*this, i);
    }
  }

  // Adds each bound leaf's tape gradient into its Parameter::grad.
  void accumulate_param_grads() {
    for (auto& [p, id] : bound_) {
      const Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.data.empty()) continue;
      for (size_t i = 0; i < p->grad.data.size(); ++i) p->grad.data[i] += n.grad.data[i];
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> parents;
    Vjp vjp;
  };

  Var push(Tensor value, bool rg, std::vector<int> parents, Vjp vjp, const std::string&) {
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, std::move(parents), std::move(vjp)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node_at(Var v) {
    check(v);
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node_at(Var v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  void check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw Error("tape: var does not belong to this tape");
  }

  // deque, not vector: references returned by val()/grad() must survive
  // later node pushes
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<std::pair<Parameter*, int>> bound_;
};

// Owns Parameters by name in creation order. Creation order is the traversal
// order for the optimizer and the serializer, so it must be deterministic.
class ParamStore {
 public:
  Parameter& create(const std::string& name, Tensor init) {
    if (index_.count(name)) throw Error("param store: duplicate parameter name " + name);
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("param store: unknown parameter " + name);
    return *params_[it->second];
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace simplr
