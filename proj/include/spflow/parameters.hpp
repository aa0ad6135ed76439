// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace spflow {

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

/// One gradient tensor per parameter, shaped like the store.
template <class Real = double>
using Gradients = std::vector<Tensor<Real>>;

/// Named learnable tensors with gradient and ADAM moment slots.
template <class Real = double>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
    Tensor<Real> first_moment;
    Tensor<Real> second_moment;
  };

  ParamId add(const std::string& name, Tensor<Real> value) {
    require(!index_.contains(name), "ParameterStore: duplicate parameter '" + name + "'");
    Entry e{name, std::move(value), {}, {}, {}};
    e.grad = Tensor<Real>(e.value.rows(), e.value.cols());
    e.first_moment = e.grad;
    e.second_moment = e.grad;
    entries_.push_back(std::move(e));
    index_.emplace(name, entries_.size() - 1);
    return ParamId{entries_.size() - 1};
  }

  /// Uniform in +-1/sqrt(fan_in), the usual default for linear layers.
  ParamId add_uniform(const std::string& name, std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    Tensor<Real> t(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
    return add(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParameterStore: no parameter named '" + name + "'");
    return ParamId{it->second};
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  const Entry& entry(ParamId id) const { return entries_.at(id.index); }
  Entry& entry(ParamId id) { return entries_.at(id.index); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }

  const Tensor<Real>& value(ParamId id) const { return entries_.at(id.index).value; }
  Tensor<Real>& value(ParamId id) { return entries_.at(id.index).value; }
  const Tensor<Real>& grad(ParamId id) const { return entries_.at(id.index).grad; }
  Tensor<Real>& grad(ParamId id) { return entries_.at(id.index).grad; }
  const Tensor<Real>& value(const std::string& name) const { return value(id(name)); }
  Tensor<Real>& value(const std::string& name) { return value(id(name)); }
  const Tensor<Real>& grad(const std::string& name) const { return grad(id(name)); }
  Tensor<Real>& grad(const std::string& name) { return grad(id(name)); }

  std::uint64_t step() const noexcept { return step_; }
  void set_step(std::uint64_t s) noexcept { step_ = s; }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(Real(0));
  }

  Gradients<Real> make_gradients() const {
    Gradients<Real> g;
    g.reserve(entries_.size());
    for (const auto& e : entries_) g.emplace_back(e.value.rows(), e.value.cols());
    return g;
  }

  /// grad += scale * g, parameter by parameter.
  void accumulate(const Gradients<Real>& g, Real scale = Real(1)) {
    require(g.size() == entries_.size(), "ParameterStore::accumulate: gradient count mismatch");
    for (std::size_t p = 0; p < entries_.size(); ++p) {
      auto dst = entries_[p].grad.values();
      auto src = g[p].values();
      require(dst.size() == src.size(), "ParameterStore::accumulate: shape mismatch for " + entries_[p].name);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
    }
  }

  /// Copy with values converted to another precision; moments and step are dropped.
  template <class Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

}  // namespace spflow
