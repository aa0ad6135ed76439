// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "geometry.hpp"
#include "interpolation.hpp"
#include "layers.hpp"

namespace spflow {

struct LossConfig {
  double alpha = 0.5;            // smoothness weight
  double beta = 0.2;             // consistency weight
  std::size_t smooth_k = 8;      // neighbors per point, self excluded
  bool mean_normalized = false;  // divide each sum by its term count
  bool symmetric = true;         // also supervise the target-side flow

  void validate() const {
    require(alpha >= 0 && beta >= 0, "LossConfig: loss weights must be non-negative");
    require(smooth_k >= 1, "LossConfig: smoothness neighborhood must be >= 1");
  }
};

/// total = chamfer + alpha * smoothness + beta * consistency.
struct LossReport {
  double chamfer = 0;
  double smoothness = 0;
  double consistency = 0;
  double total = 0;
  double alpha = 0;
  double beta = 0;
};

inline LossReport total_loss(double chamfer, double smoothness, double consistency, double alpha, double beta) {
  require(alpha >= 0 && beta >= 0, "total_loss: loss weights must be non-negative");
  require(std::isfinite(chamfer) && std::isfinite(smoothness) && std::isfinite(consistency),
          "total_loss: non-finite loss part");
  return {chamfer, smoothness, consistency, chamfer + alpha * smoothness + beta * consistency, alpha, beta};
}

/// Sum over q of min ||q - p'|| plus sum over p' of min ||p' - q|| (unsquared).
template <class Real>
Var<Real> chamfer_loss(const Var<Real>& warped, const PointCloud<Real>& target, bool mean_normalized = false) {
  require(warped.rows() > 0 && warped.cols() == 3, "chamfer_loss: warped cloud must be non-empty n x 3");
  auto& tape = warped.tape();
  const auto& q = target.coords();
  auto q_var = tape.constant(q);
  const auto to_warped = nearest_match(q, warped.value());
  const auto to_target = nearest_match(warped.value(), q);
  tape.note(to_warped);
  tape.note(to_target);
  auto a = ad::sum(ad::row_norm(ad::sub(q_var, ad::gather_rows(warped, to_warped))));
  auto b = ad::sum(ad::row_norm(ad::sub(warped, ad::gather_rows(q_var, to_target))));
  if (mean_normalized) {
    a = ad::scale(a, Real(1) / static_cast<Real>(q.rows()));
    b = ad::scale(b, Real(1) / static_cast<Real>(warped.rows()));
  }
  return ad::add(a, b);
}

/// The k nearest neighbors of every point with the point itself removed.
template <class Real>
Index neighbors_excluding_self(const PointCloud<Real>& cloud, std::size_t k) {
  require(cloud.size() > 1, "smoothness_loss: needs at least two points");
  require(k < cloud.size(), "smoothness_loss: neighborhood k must be < n");
  auto nb = knn(cloud, cloud, k + 1);
  Index out;
  out.reserve(cloud.size() * k);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::size_t taken = 0;
    for (std::size_t j = 0; j <= k && taken < k; ++j) {
      const auto idx = nb.index(i, j);
      if (idx == i) continue;
      out.push_back(idx);
      ++taken;
    }
  }
  return out;
}

/// sum_i (1/k) sum_{j in N'_i} ||f_i - f_j||.
template <class Real>
Var<Real> smoothness_loss(const PointCloud<Real>& cloud, const Var<Real>& flow, std::size_t k,
                          bool mean_normalized = false) {
  require(flow.rows() == cloud.size(), "smoothness_loss: flow rows must match point count");
  const auto nbrs = neighbors_excluding_self(cloud, k);
  const auto rep = repeat_index(cloud.size(), k);
  auto diff = ad::sub(ad::gather_rows(flow, rep), ad::gather_rows(flow, nbrs));
  auto s = ad::scale(ad::sum(ad::row_norm(diff)), Real(1) / static_cast<Real>(k));
  if (mean_normalized) s = ad::scale(s, Real(1) / static_cast<Real>(cloud.size()));
  return s;
}

/// sum_i ||Fp_i - Omega(Fq)_i|| + sum_j ||Fq_j - Omega(Fp)_j||.
template <class Real>
Var<Real> consistency_loss(const Var<Real>& fp, const Var<Real>& fq, const PointCloud<Real>& p,
                           const PointCloud<Real>& q, bool mean_normalized = false) {
  require(fp.rows() == p.size() && fq.rows() == q.size(), "consistency_loss: flow rows must match clouds");
  auto a = ad::sum(ad::row_norm(ad::sub(fp, backward_flow(fq, q, p))));
  auto b = ad::sum(ad::row_norm(ad::sub(fq, backward_flow(fp, p, q))));
  if (mean_normalized) {
    a = ad::scale(a, Real(1) / static_cast<Real>(p.size()));
    b = ad::scale(b, Real(1) / static_cast<Real>(q.size()));
  }
  return ad::add(a, b);
}

template <class Real = double>
struct LossTerms {
  Var<Real> chamfer;
  Var<Real> smoothness;
  Var<Real> consistency;
  Var<Real> total;

  LossReport report(double alpha, double beta) const {
    return total_loss(chamfer.value().item(), smoothness.value().item(), consistency.value().item(), alpha, beta);
  }
};

/// Self-supervised objective for one pair of predicted flows. Chamfer and
/// smoothness are applied to the P-side flow and, when `symmetric`, also to
/// the Q-side flow warped back towards P.
template <class Real>
LossTerms<Real> flow_losses(const PointCloud<Real>& p, const PointCloud<Real>& q, const Var<Real>& fp,
                            const Var<Real>& fq, const LossConfig& cfg) {
  cfg.validate();
  auto& tape = fp.tape();
  auto warp = [&](const PointCloud<Real>& c, const Var<Real>& f) { return ad::add(tape.constant(c.coords()), f); };
  auto ch = chamfer_loss(warp(p, fp), q, cfg.mean_normalized);
  auto sm = smoothness_loss(p, fp, cfg.smooth_k, cfg.mean_normalized);
  if (cfg.symmetric) {
    ch = ad::add(ch, chamfer_loss(warp(q, fq), p, cfg.mean_normalized));
    sm = ad::add(sm, smoothness_loss(q, fq, cfg.smooth_k, cfg.mean_normalized));
  }
  auto co = consistency_loss(fp, fq, p, q, cfg.mean_normalized);
  auto total = ad::add(ch, ad::add(ad::scale(sm, static_cast<Real>(cfg.alpha)), ad::scale(co, static_cast<Real>(cfg.beta))));
  return {ch, sm, co, total};
}

}  // namespace spflow
