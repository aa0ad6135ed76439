// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "geometry.hpp"
#include "layers.hpp"

namespace spflow {

inline constexpr double kExponentClamp = 30.0;

/// n x m soft correspondence between two clouds.
template <class Real = double>
struct TransportPlan {
  Var<Real> plan;
  double epsilon = 0.03;
  std::size_t iterations = 0;
};

/// exp(clamp(<x_i, y_j> / (sqrt(d) * epsilon), -30, 30)).
template <class Real>
TransportPlan<Real> correlation_kernel(const Var<Real>& x, const Var<Real>& y, double epsilon) {
  require(x.cols() == y.cols(), "correlation_kernel: feature widths differ (" + std::to_string(x.cols()) + " vs " +
                                    std::to_string(y.cols()) + ")");
  require(epsilon > 0, "correlation_kernel: epsilon must be positive");
  const auto s = static_cast<Real>(1.0 / (std::sqrt(static_cast<double>(x.cols())) * epsilon));
  auto logits = ad::scale(ad::matmul(x, ad::transpose(y)), s);
  const auto c = static_cast<Real>(kExponentClamp);
  return {ad::exp_clamped(logits, -c, c), epsilon, 0};
}

/// Balanced Sinkhorn scaling towards row marginals 1/n and column marginals 1/m.
///
/// Runs `iterations` full sweeps (row scaling, then column scaling) followed
/// by a closing row sweep, so rows are exact and columns carry the residual.
/// The plan is kept in factored form diag(a) K diag(b) while iterating.
template <class Real>
TransportPlan<Real> sinkhorn(const TransportPlan<Real>& kernel, std::size_t iterations) {
  const auto& k = kernel.plan;
  const auto& kv = k.value();
  require(kv.size() > 0, "sinkhorn: empty kernel");
  for (auto v : kv.values()) require(v > Real(0) && std::isfinite(v), "sinkhorn: kernel entries must be positive");
  auto& tape = k.tape();
  const std::size_t n = kv.rows(), m = kv.cols();
  const auto row_target = static_cast<Real>(1.0 / static_cast<double>(n));
  const auto col_target = static_cast<Real>(1.0 / static_cast<double>(m));
  auto b = tape.constant(Tensor<Real>(m, 1, Real(1)));
  auto row_sweep = [&](const Var<Real>& bv) { return ad::scale(ad::reciprocal(ad::matmul(k, bv)), row_target); };
  auto a = row_sweep(b);
  for (std::size_t s = 0; s < iterations; ++s) {
    b = ad::scale(ad::reciprocal(ad::reshape(ad::matmul(ad::reshape(a, 1, n), k), m, 1)), col_target);
    a = row_sweep(b);
  }
  auto plan = ad::mul_row(ad::mul_col(k, a), ad::reshape(b, 1, m));
  return {plan, kernel.epsilon, iterations};
}

/// Largest absolute deviation of row sums from 1/n and column sums from 1/m.
template <class Real>
std::pair<double, double> marginal_deviation(const Tensor<Real>& plan) {
  const double rt = 1.0 / static_cast<double>(plan.rows()), ct = 1.0 / static_cast<double>(plan.cols());
  std::vector<double> cols(plan.cols(), 0.0);
  double row_dev = 0;
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    double r = 0;
    for (std::size_t j = 0; j < plan.cols(); ++j) {
      r += plan(i, j);
      cols[j] += plan(i, j);
    }
    row_dev = std::max(row_dev, std::abs(r - rt));
  }
  double col_dev = 0;
  for (double c : cols) col_dev = std::max(col_dev, std::abs(c - ct));
  return {row_dev, col_dev};
}

/// f_i = (sum_j w_ij q_j) / (sum_j w_ij) - p_i for an n x m plan.
template <class Real>
Var<Real> initial_flow(const Var<Real>& plan, const PointCloud<Real>& p, const PointCloud<Real>& q) {
  require(plan.rows() == p.size() && plan.cols() == q.size(), "initial_flow: plan shape " +
                                                                  plan.value().shape_string() +
                                                                  " does not match clouds");
  auto& tape = plan.tape();
  auto sums = ad::row_sum(plan);
  for (auto v : sums.value().values()) require(v > Real(0), "initial_flow: a plan row sums to zero");
  auto target = ad::mul_col(ad::matmul(plan, tape.constant(q.coords())), ad::reciprocal(sums));
  return ad::sub(target, tape.constant(p.coords()));
}

/// Flows for both clouds from one plan: P uses it directly, Q uses its transpose.
template <class Real>
std::pair<Var<Real>, Var<Real>> bidirectional_initial_flow(const Var<Real>& plan, const PointCloud<Real>& p,
                                                           const PointCloud<Real>& q) {
  return {initial_flow(plan, p, q), initial_flow(ad::transpose(plan), q, p)};
}

}  // namespace spflow
