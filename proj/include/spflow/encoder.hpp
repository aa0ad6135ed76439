// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "layers.hpp"

namespace spflow {

/// Per-point descriptors, n x d.
template <class Real = double>
using FeatureMap = Var<Real>;

/// Local set convolution: gather k_conv neighbors, concatenate
/// (neighbor feature, neighbor - center offset), shared MLP, max-pool.
///
/// Layer l uses parameters "<prefix>.<l>.weight" and "<prefix>.<l>.bias". The
/// first weight has in_features + 3 rows: the feature block first, then the
/// offset block.
struct SetConvParams {
  std::string prefix;
  std::size_t in_features = 0;  // 0 means coordinates only
  std::vector<std::size_t> widths;
  std::size_t k_conv = 8;
  double slope = 0.1;
  bool output_activation = true;

  std::size_t out_features() const { return widths.back(); }

  template <class Real>
  void register_parameters(ParameterStore<Real>& store, Rng& rng) const {
    require(!widths.empty(), "SetConvParams: at least one layer required");
    std::size_t in = in_features + 3;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      add_linear(store, prefix + "." + std::to_string(l), in, widths[l], rng);
      in = widths[l];
    }
  }

  /// Checks that stored shapes chain from in_features + 3 through widths.
  template <class Real>
  void validate(const ParameterStore<Real>& store) const {
    require(!widths.empty(), "SetConvParams: at least one layer required");
    std::size_t in = in_features + 3;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const auto base = prefix + "." + std::to_string(l);
      const auto& w = store.value(base + ".weight");
      const auto& b = store.value(base + ".bias");
      require(w.rows() == in && w.cols() == widths[l], "SetConvParams: " + base + ".weight has shape " +
                                                           w.shape_string() + ", expected [" + std::to_string(in) +
                                                           " x " + std::to_string(widths[l]) + "]");
      require(b.rows() == 1 && b.cols() == widths[l], "SetConvParams: " + base + ".bias shape mismatch");
      in = widths[l];
    }
  }
};

template <class Real>
Var<Real> set_conv(const LocalFrame<Real>& frame, const std::optional<Var<Real>>& feats, const SetConvParams& params,
                   ParamBank<Real>& bank) {
  require(!params.widths.empty(), "set_conv: no layers");
  require(params.k_conv == frame.k, "set_conv: frame neighborhood size differs from k_conv");
  auto& tape = bank.tape();
  const std::size_t in = feats ? feats->cols() : 0;
  require(in == params.in_features, "set_conv: feature width " + std::to_string(in) + " but layer expects " +
                                        std::to_string(params.in_features));
  if (feats) require(feats->rows() == frame.size(), "set_conv: feature rows differ from point count");

  const auto slope = static_cast<Real>(params.slope);
  const auto base0 = params.prefix + ".0";
  auto w0 = bank(base0 + ".weight");
  auto rel = tape.constant(frame.rel_coords);
  // Linear maps commute with row gathers, so the feature block is applied on
  // the n points before gathering onto the n*k neighbor slots.
  std::vector<ad::GatherTerm<Real>> terms;
  if (feats) terms.push_back({ad::matmul(*feats, ad::slice_rows(w0, 0, in)), frame.neighbors});
  auto w_rel = ad::slice_rows(w0, in, in + 3);
  if (params.widths.size() == 1)
    return ad::neighborhood_max(terms, rel, w_rel, bank(base0 + ".bias"), frame.k, params.output_activation, slope);

  auto h = ad::matmul(rel, w_rel);
  for (const auto& term : terms) h = ad::add(h, ad::gather_rows(term.values, term.index));
  h = ad::add_row(h, bank(base0 + ".bias"));
  for (std::size_t l = 0; l < params.widths.size(); ++l) {
    if (l > 0) h = linear(h, bank, params.prefix + "." + std::to_string(l));
    const bool last = l + 1 == params.widths.size();
    if (!last || params.output_activation) h = ad::leaky_relu(h, slope);
  }
  return ad::group_max(h, frame.k);
}

struct EncoderConfig {
  std::vector<std::size_t> widths{16, 32, 32};
  std::size_t k_conv = 8;
  double slope = 0.1;

  std::size_t feature_dim() const { return widths.back(); }

  /// The i-th stacked set_conv ("encoder.<i>.0.weight", ...).
  SetConvParams layer(std::size_t i) const {
    SetConvParams p;
    p.prefix = "encoder." + std::to_string(i);
    p.in_features = i == 0 ? 0 : widths[i - 1];
    p.widths = {widths[i]};
    p.k_conv = k_conv;
    p.slope = slope;
    return p;
  }

  template <class Real>
  void register_parameters(ParameterStore<Real>& store, Rng& rng) const {
    for (std::size_t i = 0; i < widths.size(); ++i) layer(i).register_parameters(store, rng);
  }
};

/// Stack of set convolutions on relative coordinates only; no absolute
/// position enters, so the output is invariant to translating the cloud.
template <class Real>
FeatureMap<Real> encode(const LocalFrame<Real>& frame, const EncoderConfig& cfg, ParamBank<Real>& bank) {
  std::optional<Var<Real>> feats;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) feats = set_conv(frame, feats, cfg.layer(i), bank);
  return *feats;
}

}  // namespace spflow
