// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "parameters.hpp"
#include "tensor.hpp"

namespace spflow::ad {

template <class Real>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class Real = double>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Real>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<Real>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Recording tape for reverse-mode differentiation over whole tensors.
/// Node storage never moves, so references returned by value() stay valid.
///
/// Every op appends one node holding its forward value and, when any input
/// requires a gradient, a closure that pushes the node's adjoint back into
/// its inputs. Nodes are stored in creation order, so a single reverse sweep
/// is a valid topological traversal.
///
/// Non-smooth ops (ReLU kinks, max-pooling, clamping, index selection done
/// outside the tape) fold their discrete decisions into `signature()`. Finite
/// difference checks compare signatures to detect probes that crossed a kink.
template <class Real = double>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value) { return push("constant", std::move(value), false, {}); }

  /// Differentiable leaf that is not a stored parameter.
  Var<Real> variable(Tensor<Real> value) { return push("variable", std::move(value), grad_enabled_, {}); }

  /// With gradients disabled, new leaves are recorded as constants and no
  /// backward closures are kept (inference mode).
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<Real> parameter(const ParameterStore<Real>& store, ParamId id) {
    auto v = push("parameter", store.value(id), grad_enabled_, {});
    nodes_[v.id()].param = static_cast<std::ptrdiff_t>(id.index);
    return v;
  }

  Var<Real> parameter(const ParameterStore<Real>& store, const std::string& name) {
    return parameter(store, store.id(name));
  }

  /// Appends a node. `inputs` decide whether the node needs a gradient.
  Var<Real> push(const char* op, Tensor<Real> value, std::initializer_list<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
    return push(op, std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var<Real> push(const char* op, Tensor<Real> value, std::span<const std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
    return push(op, std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<Real>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adjoint slot of a node, zero-initialized on first access.
  Tensor<Real>& adjoint(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.adjoint.same_shape(n.value) || n.adjoint.size() == 0)
      n.adjoint = Tensor<Real>(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  /// Propagates d(loss)/d(node) to every node that requires a gradient.
  void backward(Var<Real> loss) {
    require(loss.value().size() == 1, "backward: loss must be a scalar, got " + loss.value().shape_string());
    for (auto& n : nodes_) n.adjoint = Tensor<Real>();
    if (!nodes_[loss.id()].needs_grad) return;
    adjoint(loss.id())[0] = Real(1);
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.backward || n.adjoint.size() == 0) continue;
      if (!n.adjoint.all_finite()) throw NumericError(std::string("backward:") + n.op);
      n.backward(*this, k);
    }
  }

  /// Gradient of the last backward() with respect to `v` (zeros if unreached).
  Tensor<Real> grad(Var<Real> v) const {
    const auto& n = nodes_.at(v.id());
    if (n.adjoint.size() == n.value.size() && n.value.size() > 0) return n.adjoint;
    return Tensor<Real>(n.value.rows(), n.value.cols());
  }

  /// Adds parameter adjoints into `out`. A parameter used several times sums.
  void accumulate_parameter_gradients(Gradients<Real>& out) const {
    for (const auto& n : nodes_) {
      if (n.param < 0 || n.adjoint.size() == 0) continue;
      auto& dst = out.at(static_cast<std::size_t>(n.param));
      require(dst.same_shape(n.value), "accumulate_parameter_gradients: shape mismatch");
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.adjoint[i];
    }
  }

  /// Folds a discrete decision into the tape signature.
  void note(std::uint64_t decision) {
    signature_ ^= decision + 0x9E3779B97F4A7C15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  void note(std::span<const std::size_t> decisions) {
    for (auto d : decisions) note(static_cast<std::uint64_t>(d));
  }
  std::uint64_t signature() const noexcept { return signature_; }

 private:
  struct Node {
    const char* op;
    Tensor<Real> value;
    Tensor<Real> adjoint;
    BackwardFn backward;
    bool needs_grad = false;
    std::ptrdiff_t param = -1;
  };

  Var<Real> push(const char* op, Tensor<Real> value, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(value), {}, std::move(fn), needs, -1});
    return Var<Real>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

/// Convenience wrapper: zero the store's gradients, run backward, write them.
template <class Real>
void backward(Var<Real> loss, ParameterStore<Real>& store) {
  auto& tape = loss.tape();
  tape.backward(loss);
  store.zero_grad();
  auto g = store.make_gradients();
  tape.accumulate_parameter_gradients(g);
  store.accumulate(g);
}

}  // namespace spflow::ad
