// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "geometry.hpp"
#include "ops.hpp"
#include "parameters.hpp"

namespace spflow {

using ad::Index;
using ad::Tape;
using ad::Var;

/// Parameters of one store bound to one tape. Each parameter becomes a single
/// leaf no matter how often it is used, so its gradient sums over all uses.
template <class Real = double>
class ParamBank {
 public:
  ParamBank(Tape<Real>& tape, const ParameterStore<Real>& store) : tape_(&tape), store_(&store) {}

  Var<Real> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto v = tape_->parameter(*store_, name);
    bound_.emplace(name, v);
    return v;
  }

  Tape<Real>& tape() const { return *tape_; }
  const ParameterStore<Real>& store() const { return *store_; }

 private:
  Tape<Real>* tape_;
  const ParameterStore<Real>* store_;
  std::map<std::string, Var<Real>> bound_;
};

/// Dense layer `x W + b` for parameters "<prefix>.weight" / "<prefix>.bias".
template <class Real>
Var<Real> linear(const Var<Real>& x, ParamBank<Real>& bank, const std::string& prefix) {
  return ad::add_row(ad::matmul(x, bank(prefix + ".weight")), bank(prefix + ".bias"));
}

/// Registers a `fan_in x fan_out` weight and a `1 x fan_out` bias.
template <class Real>
void add_linear(ParameterStore<Real>& store, const std::string& prefix, std::size_t fan_in, std::size_t fan_out,
                Rng& rng) {
  store.add_uniform(prefix + ".weight", fan_in, fan_out, fan_in, rng);
  store.add_uniform(prefix + ".bias", 1, fan_out, fan_in, rng);
}

/// Index vector [0,0,..,0, 1,1,..,1, ...] with each row repeated `times`.
inline Index repeat_index(std::size_t n, std::size_t times) {
  Index idx(n * times);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < times; ++j) idx[i * times + j] = i;
  return idx;
}

/// A cloud prepared for local set convolutions: its own k_conv neighborhoods
/// (self included) and the relative offsets neighbor - center.
template <class Real = double>
struct LocalFrame {
  PointCloud<Real> cloud;
  std::size_t k = 0;
  Index neighbors;          // n * k
  Index centers;            // n * k, repeat_index(n, k)
  Tensor<Real> rel_coords;  // (n * k) x 3

  LocalFrame(PointCloud<Real> c, std::size_t k_conv) : cloud(std::move(c)), k(k_conv) {
    require(k_conv >= 1, "set_conv: k_conv must be >= 1");
    require(k_conv <= cloud.size(), "set_conv: k_conv (" + std::to_string(k_conv) + ") exceeds point count (" +
                                        std::to_string(cloud.size()) + ")");
    auto nb = knn(cloud, cloud, k_conv);
    neighbors = std::move(nb.indices);
    centers = repeat_index(cloud.size(), k_conv);
    rel_coords = Tensor<Real>(neighbors.size(), 3);
    const auto& p = cloud.coords();
    for (std::size_t r = 0; r < neighbors.size(); ++r)
      for (std::size_t c = 0; c < 3; ++c) rel_coords(r, c) = p(neighbors[r], c) - p(centers[r], c);
  }

  std::size_t size() const { return cloud.size(); }
};

}  // namespace spflow
