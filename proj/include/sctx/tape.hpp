#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "sctx/tensor.hpp"

namespace sctx {

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameters in registration order. Addresses are stable.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = items_.size();
    Tensor<T> grad(init.shape(), T{0});
    items_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, std::move(init), std::move(grad)}));
    return *items_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return *items_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->get(name);
  }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  std::size_t size() const noexcept { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *items_[i]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.fill(T{0});
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so the node list is already topologically sorted.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf whose gradient is tracked (tests and grad checks use this).
  Var<T> variable(Tensor<T> value) { return push(std::move(value), grad_enabled_, nullptr, {}); }

  /// Leaf bound to a parameter; backward() accumulates into Parameter::grad.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, grad_enabled_, &p, {});
    param_nodes_[&p] = v.id();
    return v;
  }

  /// Appends an op result. `backward` is kept only when some input needs a
  /// gradient; it receives the tape and the new node's id.
  template <typename F>
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, F&& backward) {
    return record_range(std::move(value), inputs.begin(), inputs.end(), std::forward<F>(backward));
  }

  template <typename F>
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, F&& backward) {
    return record_range(std::move(value), inputs.begin(), inputs.end(), std::forward<F>(backward));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward rule once,
  /// in reverse order. Parameter gradients are added to Parameter::grad.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
    grad(root.id()).fill(T{1});
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& dst = n.param->grad.storage();
        const auto& src = nodes_[i].grad.storage();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  std::size_t backward_visits() const noexcept { return visits_; }

  void track_branches(bool on) noexcept { track_branches_ = on; }
  bool tracking_branches() const noexcept { return track_branches_; }

  /// Branch decisions taken by non-smooth ops (ReLU signs, pooling argmax).
  /// Two evaluations with equal signatures went through the same smooth piece.
  void note_branch(std::uint64_t token) { signature_ = (signature_ ^ token) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL; }
  std::uint64_t branch_signature() const noexcept { return signature_; }

 private:
  template <typename It, typename F>
  Var<T> record_range(Tensor<T> value, It first, It last, F&& backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by a forward op");
    bool needs = false;
    for (It it = first; it != last; ++it) needs = needs || nodes_[it->id()].requires_grad;
    if (!needs) return push(std::move(value), false, nullptr, nullptr);
    return push(std::move(value), true, nullptr, Backward(std::forward<F>(backward)));
  }

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(backward), requires_grad, param});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_;
  bool track_branches_ = false;
  std::size_t visits_ = 0;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

}  // namespace sctx
