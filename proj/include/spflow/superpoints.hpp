// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "geometry.hpp"
#include "layers.hpp"

namespace spflow {

/// L superpoint centers: coordinate, flow and descriptor rows.
template <class Real = double>
struct SuperpointSet {
  Var<Real> coords;       // L x 3
  Var<Real> flows;        // L x 3
  Var<Real> descriptors;  // L x d

  std::size_t size() const { return coords.rows(); }
};

/// Soft assignment of every point to its K nearest centers.
template <class Real = double>
struct AssociationMap {
  std::size_t k = 0;
  Index centers;      // n * k center indices, nearest first
  Var<Real> weights;  // n x k, rows sum to one

  std::size_t points() const { return weights.rows(); }
};

/// Points and centers moved by the previous flow, with the descriptor of the
/// nearest target point at each warped position.
template <class Real = double>
struct WarpedCorrespondence {
  Var<Real> points;              // n x 3, p + f
  Var<Real> point_descriptors;   // n x d, rows of the target feature map
  Var<Real> centers;             // L x 3, sc + sf
  Var<Real> center_descriptors;  // L x d
  Index point_match;
  Index center_match;
};

/// Pairwise differences fed to the association MLPs, one row per (point, center).
template <class Real = double>
struct AssociationLogitInputs {
  Var<Real> feature_diff;     // (n*K) x 2d
  Var<Real> coordinate_diff;  // (n*K) x 6
};

/// Two MLPs (feature space and coordinate space), each input -> hidden ->
/// hidden followed by a sum over channels that yields one logit per pair.
struct AssociationConfig {
  std::size_t hidden = 16;
  double slope = 0.1;

  template <class Real>
  void register_parameters(ParameterStore<Real>& store, std::size_t feature_dim, Rng& rng) const {
    add_linear(store, "assoc_u.0", 2 * feature_dim, hidden, rng);
    add_linear(store, "assoc_u.1", hidden, hidden, rng);
    add_linear(store, "assoc_g.0", 6, hidden, rng);
    add_linear(store, "assoc_g.1", hidden, hidden, rng);
  }
};

inline constexpr double kEmptyCenterMass = 1e-8;

/// FPS (seed 0) centers copying coordinate, initial flow and descriptor.
template <class Real>
SuperpointSet<Real> init_superpoints(const PointCloud<Real>& cloud, const Var<Real>& flow0, const Var<Real>& feats,
                                     std::size_t count) {
  require(count >= 1 && count <= cloud.size(), "init_superpoints: L=" + std::to_string(count) +
                                                   " must lie in [1, n=" + std::to_string(cloud.size()) + "]");
  require(flow0.rows() == cloud.size() && feats.rows() == cloud.size(), "init_superpoints: row counts differ");
  auto idx = farthest_point_sample(cloud, count, 0);
  auto& tape = flow0.tape();
  return {tape.constant(cloud.subset(idx).coords()), ad::gather_rows(flow0, idx), ad::gather_rows(feats, idx)};
}

template <class Real>
WarpedCorrespondence<Real> warp_correspondences(const PointCloud<Real>& cloud, const Var<Real>& flow_prev,
                                                const SuperpointSet<Real>& centers, const PointCloud<Real>& target,
                                                const Var<Real>& target_feats) {
  require(flow_prev.rows() == cloud.size() && flow_prev.cols() == 3, "warp_correspondences: flow shape mismatch");
  require(target_feats.rows() == target.size(), "warp_correspondences: target features do not match target cloud");
  auto& tape = flow_prev.tape();
  WarpedCorrespondence<Real> w;
  w.points = ad::add(tape.constant(cloud.coords()), flow_prev);
  w.centers = ad::add(centers.coords, centers.flows);
  w.point_match = nearest_match(w.points.value(), target.coords());
  w.center_match = nearest_match(w.centers.value(), target.coords());
  tape.note(w.point_match);
  tape.note(w.center_match);
  w.point_descriptors = ad::gather_rows(target_feats, w.point_match);
  w.center_descriptors = ad::gather_rows(target_feats, w.center_match);
  return w;
}

/// u_{i,k} = (x_i || x^_i) - (sd_k || sd^_k) and g_{i,k} = (p_i || p^_i) - (sc_k || sc^_k)
/// for the K centers nearest to each point, in `neighbor_centers` order.
template <class Real>
AssociationLogitInputs<Real> association_inputs(const PointCloud<Real>& cloud, const Var<Real>& feats,
                                                const SuperpointSet<Real>& centers,
                                                const WarpedCorrespondence<Real>& warped,
                                                const Index& neighbor_centers, std::size_t k) {
  auto& tape = feats.tape();
  const auto rep = repeat_index(cloud.size(), k);
  auto point_feat = ad::concat_cols(feats, warped.point_descriptors);
  auto center_feat = ad::concat_cols(centers.descriptors, warped.center_descriptors);
  auto point_xyz = ad::concat_cols(tape.constant(cloud.coords()), warped.points);
  auto center_xyz = ad::concat_cols(centers.coords, warped.centers);
  return {ad::sub(ad::gather_rows(point_feat, rep), ad::gather_rows(center_feat, neighbor_centers)),
          ad::sub(ad::gather_rows(point_xyz, rep), ad::gather_rows(center_xyz, neighbor_centers))};
}

/// Softmax over the K nearest centers of MLP_u(u) + MLP_g(g).
template <class Real>
AssociationMap<Real> association(const PointCloud<Real>& cloud, const Var<Real>& feats,
                                 const SuperpointSet<Real>& centers, const WarpedCorrespondence<Real>& warped,
                                 std::size_t k, const AssociationConfig& cfg, ParamBank<Real>& bank) {
  require(k >= 1 && k <= centers.size(), "association: K=" + std::to_string(k) + " must lie in [1, L=" +
                                             std::to_string(centers.size()) + "]");
  auto& tape = feats.tape();
  auto nb = knn(cloud.coords(), centers.coords.value(), k);
  tape.note(nb.indices);
  const auto inputs = association_inputs(cloud, feats, centers, warped, nb.indices, k);
  const auto slope = static_cast<Real>(cfg.slope);
  auto mlp = [&](const Var<Real>& x, const std::string& name) {
    auto h = ad::leaky_relu(linear(x, bank, name + ".0"), slope);
    return ad::row_sum(linear(h, bank, name + ".1"));
  };
  auto logits = ad::add(mlp(inputs.feature_diff, "assoc_u"), mlp(inputs.coordinate_diff, "assoc_g"));
  auto weights = ad::softmax_rows(ad::reshape(logits, cloud.size(), k));
  return {k, std::move(nb.indices), weights};
}

/// Association-weighted means of the points attending each center. A center
/// with total weight below 1e-8 keeps its previous values.
template <class Real>
SuperpointSet<Real> update_centers(const AssociationMap<Real>& assoc, const PointCloud<Real>& cloud,
                                   const Var<Real>& flow_prev, const Var<Real>& feats,
                                   const SuperpointSet<Real>& previous) {
  const std::size_t n = cloud.size(), k = assoc.k, count = previous.size();
  require(assoc.points() == n && assoc.centers.size() == n * k, "update_centers: association does not match cloud");
  auto& tape = feats.tape();
  const std::size_t d = feats.cols();
  auto w = ad::reshape(assoc.weights, n * k, 1);
  auto values = ad::concat_cols(std::vector<Var<Real>>{tape.constant(cloud.coords()), flow_prev, feats});
  auto weighted = ad::mul_col(ad::gather_rows(values, repeat_index(n, k)), w);
  auto numer = ad::scatter_add_rows(weighted, assoc.centers, count);
  auto mass = ad::scatter_add_rows(w, assoc.centers, count);

  std::vector<bool> empty(count);
  Tensor<Real> pad(count, 1);
  for (std::size_t l = 0; l < count; ++l) {
    empty[l] = mass.value()[l] < Real(kEmptyCenterMass);
    pad[l] = empty[l] ? Real(1) : Real(0);
  }
  auto mean = ad::mul_col(numer, ad::reciprocal(ad::add(mass, tape.constant(pad))));
  auto prev = ad::concat_cols(std::vector<Var<Real>>{previous.coords, previous.flows, previous.descriptors});
  auto merged = ad::select_rows(empty, mean, prev);
  return {ad::slice_cols(merged, 0, 3), ad::slice_cols(merged, 3, 6), ad::slice_cols(merged, 6, 6 + d)};
}

/// Per-point index of the center with the largest association weight.
template <class Real>
std::vector<std::size_t> dominant_centers(const AssociationMap<Real>& assoc) {
  const auto& w = assoc.weights.value();
  std::vector<std::size_t> out(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < assoc.k; ++j)
      if (w(i, j) > w(i, best)) best = j;
    out[i] = assoc.centers[i * assoc.k + best];
  }
  return out;
}

}  // namespace spflow
