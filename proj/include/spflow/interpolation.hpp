// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "geometry.hpp"
#include "layers.hpp"

namespace spflow {

/// Differentiable inverse-distance interpolation of `values` (one row per
/// source point) onto `dest`. The weights are recomputed on the tape from
/// `source_pos`, so gradients reach both the values and the source positions.
/// Neighbor selection and the coincidence rule are discrete.
template <class Real>
Var<Real> interpolate(const Var<Real>& values, const Var<Real>& source_pos, const Tensor<Real>& dest) {
  require(values.rows() == source_pos.rows(), "interpolate: value rows must match source count");
  auto& tape = values.tape();
  const auto stencil = interpolation_stencil(source_pos.value(), dest);
  tape.note(stencil.indices);
  const std::size_t n = dest.rows(), k = stencil.k;
  const auto rep = repeat_index(n, k);

  Tensor<Real> dest_rep(n * k, 3);
  Tensor<Real> one_hot(n * k, 1);
  std::vector<bool> coincident(n * k);
  for (std::size_t r = 0; r < n * k; ++r) {
    for (std::size_t c = 0; c < 3; ++c) dest_rep(r, c) = dest(rep[r], c);
    const std::size_t q = rep[r];
    coincident[r] = stencil.weights[q * k] == Real(1) && (k == 1 || stencil.weights[q * k + 1] == Real(0));
    one_hot[r] = (r % k == 0) ? Real(1) : Real(0);
  }

  auto dist = ad::row_norm(ad::sub(ad::gather_rows(source_pos, stencil.indices), tape.constant(std::move(dest_rep))));
  auto raw = ad::reciprocal(ad::add_scalar(dist, static_cast<Real>(kInterpolationEps)));
  auto total = ad::scatter_add_rows(raw, rep, n);
  auto w = ad::mul_col(raw, ad::gather_rows(ad::reciprocal(total), rep));
  w = ad::select_rows(coincident, w, tape.constant(std::move(one_hot)));
  return ad::scatter_add_rows(ad::mul_col(ad::gather_rows(values, stencil.indices), w), rep, n);
}

/// The other cloud's flow carried onto `cloud` and reversed: the other cloud
/// is warped by its own flow, interpolated at `cloud`, and negated, so that
/// perfectly consistent forward/backward flows give `flow - omega == 0`.
template <class Real>
Var<Real> backward_flow(const Var<Real>& other_flow, const PointCloud<Real>& other, const PointCloud<Real>& cloud) {
  auto& tape = other_flow.tape();
  auto warped = ad::add(tape.constant(other.coords()), other_flow);
  return ad::neg(interpolate(other_flow, warped, cloud.coords()));
}

}  // namespace spflow
