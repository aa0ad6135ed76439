// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encoder.hpp"
#include "interpolation.hpp"
#include "losses.hpp"
#include "superpoints.hpp"
#include "transport.hpp"

namespace spflow {

/// Everything that shapes one forward pass. Widths fix the parameter schema;
/// L, K and T may change between runs of the same checkpoint.
struct PipelineConfig {
  std::size_t superpoints = 30;  // L
  std::size_t knn = 2;           // K
  std::size_t iterations = 3;    // T
  EncoderConfig encoder;
  AssociationConfig assoc;
  std::size_t hidden_dim = 32;         // d_h
  std::size_t embed_k = 8;             // flow-embedding neighbors in the target
  std::size_t confidence_hidden = 16;  // pi / tau hidden width
  std::size_t regressor_hidden = 16;
  double slope = 0.1;
  double sinkhorn_epsilon = 0.03;
  std::size_t sinkhorn_iterations = 10;
  LossConfig loss;

  std::size_t feature_dim() const { return encoder.feature_dim(); }

  void validate() const {
    require(iterations >= 1, "PipelineConfig: T must be >= 1");
    require(superpoints >= 1, "PipelineConfig: L must be >= 1");
    require(knn >= 1 && knn <= superpoints, "PipelineConfig: K must lie in [1, L]");
    require(!encoder.widths.empty(), "PipelineConfig: encoder needs at least one layer");
    require(sinkhorn_epsilon > 0, "PipelineConfig: Sinkhorn epsilon must be positive");
    loss.validate();
  }

  SetConvParams context_conv(const std::string& prefix) const {
    return SetConvParams{prefix, hidden_dim, {hidden_dim}, encoder.k_conv, slope, false};
  }
  SetConvParams gru_conv(const std::string& prefix) const {
    return SetConvParams{prefix, 2 * hidden_dim, {hidden_dim}, encoder.k_conv, slope, false};
  }
};

/// Registers every learnable tensor of the model with a seeded uniform init.
template <class Real = double>
ParameterStore<Real> init_parameters(const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore<Real> store;
  Rng rng(seed);
  const std::size_t d = cfg.feature_dim(), h = cfg.hidden_dim;
  cfg.encoder.register_parameters(store, rng);
  cfg.assoc.register_parameters(store, d, rng);
  for (const char* side : {"conf_p", "conf_q"}) {
    add_linear(store, std::string(side) + ".0", 3, cfg.confidence_hidden, rng);
    add_linear(store, std::string(side) + ".1", cfg.confidence_hidden, 1, rng);
  }
  add_linear(store, "embed.0", 2 * d + 3, h, rng);
  add_linear(store, "flow_linear", 3, h, rng);
  cfg.context_conv("context_c").register_parameters(store, rng);
  cfg.context_conv("context_e").register_parameters(store, rng);
  for (const char* gate : {"gru_z", "gru_r", "gru_h"}) cfg.gru_conv(gate).register_parameters(store, rng);
  add_linear(store, "regressor.0", h, cfg.regressor_hidden, rng);
  add_linear(store, "regressor.1", cfg.regressor_hidden, 3, rng);
  return store;
}

/// F~_i = sum_k a_{i,k} sf_{N_i(k)}.
template <class Real>
Var<Real> reconstruct_flow(const AssociationMap<Real>& assoc, const SuperpointSet<Real>& centers) {
  require(centers.flows.cols() == 3, "reconstruct_flow: center flows must be L x 3");
  const std::size_t n = assoc.points(), k = assoc.k;
  for (auto c : assoc.centers) require(c < centers.size(), "reconstruct_flow: center index out of range");
  auto w = ad::reshape(assoc.weights, n * k, 1);
  auto picked = ad::mul_col(ad::gather_rows(centers.flows, assoc.centers), w);
  return ad::scatter_add_rows(picked, repeat_index(n, k), n);
}

/// sigmoid(MLP(flow - Omega(other flow))) per point, n x 1.
template <class Real>
std::pair<Var<Real>, Var<Real>> consistency_confidence(const Var<Real>& fp, const Var<Real>& fq,
                                                       const PointCloud<Real>& p, const PointCloud<Real>& q,
                                                       const PipelineConfig& cfg, ParamBank<Real>& bank) {
  require(fp.rows() == p.size() && fq.rows() == q.size(), "consistency_confidence: flow rows must match clouds");
  const auto slope = static_cast<Real>(cfg.slope);
  auto head = [&](const Var<Real>& x, const std::string& name) {
    auto h = ad::leaky_relu(linear(x, bank, name + ".0"), slope);
    return ad::sigmoid(linear(h, bank, name + ".1"));
  };
  auto cp = head(ad::sub(fp, backward_flow(fq, q, p)), "conf_p");
  auto cq = head(ad::sub(fq, backward_flow(fp, p, q)), "conf_q");
  return {cp, cq};
}

/// Per-iteration inputs to the GRU for one cloud.
template <class Real = double>
struct IterationContext {
  Var<Real> reconstructed;  // F~, n x 3
  Var<Real> confidence;     // C, n x 1
  Var<Real> correlation;    // F_c, n x d_h
  Var<Real> flow_feature;   // F_e, n x d_h
  Var<Real> v;              // n x d_h
};

/// Flow embedding of the cloud warped by `flow` against the target: for each
/// warped point and each of its k nearest target points, (target feature,
/// own feature, target - warped offset) through a shared layer, max-pooled.
template <class Real>
Var<Real> flow_embedding(const Var<Real>& flow, const PointCloud<Real>& cloud, const Var<Real>& feats,
                         const PointCloud<Real>& target, const Var<Real>& target_feats, const PipelineConfig& cfg,
                         ParamBank<Real>& bank) {
  auto& tape = flow.tape();
  const std::size_t n = cloud.size(), d = feats.cols();
  const std::size_t k = std::min(cfg.embed_k, target.size());
  auto warped = ad::add(tape.constant(cloud.coords()), flow);
  auto nb = knn(warped.value(), target.coords(), k);
  tape.note(nb.indices);
  const auto rep = repeat_index(n, k);
  auto rel = ad::sub(ad::gather_rows(tape.constant(target.coords()), nb.indices), ad::gather_rows(warped, rep));
  auto w = bank("embed.0.weight");
  std::vector<ad::GatherTerm<Real>> terms{{ad::matmul(target_feats, ad::slice_rows(w, 0, d)), nb.indices},
                                          {ad::matmul(feats, ad::slice_rows(w, d, 2 * d)), rep}};
  return ad::neighborhood_max(terms, rel, ad::slice_rows(w, 2 * d, 2 * d + 3), bank("embed.0.bias"), k, true,
                              static_cast<Real>(cfg.slope));
}

/// v = SetConv_c(F_c * C) + SetConv_e(F_e * C), with C broadcast over channels.
template <class Real>
IterationContext<Real> iteration_context(const Var<Real>& reconstructed, const Var<Real>& confidence,
                                         const LocalFrame<Real>& frame, const Var<Real>& feats,
                                         const PointCloud<Real>& target, const Var<Real>& target_feats,
                                         const PipelineConfig& cfg, ParamBank<Real>& bank) {
  require(confidence.rows() == frame.size() && confidence.cols() == 1, "iteration_context: confidence must be n x 1");
  auto fc = flow_embedding(reconstructed, frame.cloud, feats, target, target_feats, cfg, bank);
  auto fe = linear(reconstructed, bank, "flow_linear");
  auto v = ad::add(set_conv<Real>(frame, ad::mul_col(fc, confidence), cfg.context_conv("context_c"), bank),
                   set_conv<Real>(frame, ad::mul_col(fe, confidence), cfg.context_conv("context_e"), bank));
  return {reconstructed, confidence, fc, fe, v};
}

/// z = s(SC_z(h||v)), r = s(SC_r(h||v)), h^ = tanh(SC_h((r*h)||v)), h' = (1-z)*h + z*h^.
template <class Real>
Var<Real> gru_step(const Var<Real>& h, const Var<Real>& v, const LocalFrame<Real>& frame, const PipelineConfig& cfg,
                   ParamBank<Real>& bank) {
  require(h.rows() == v.rows() && h.rows() == frame.size(), "gru_step: row counts differ");
  auto hv = ad::concat_cols(h, v);
  auto z = ad::sigmoid(set_conv<Real>(frame, hv, cfg.gru_conv("gru_z"), bank));
  auto r = ad::sigmoid(set_conv<Real>(frame, hv, cfg.gru_conv("gru_r"), bank));
  auto cand = ad::tanh(set_conv<Real>(frame, ad::concat_cols(ad::mul(r, h), v), cfg.gru_conv("gru_h"), bank));
  auto keep = ad::add_scalar(ad::neg(z), Real(1));
  return ad::add(ad::mul(keep, h), ad::mul(z, cand));
}

/// F = F~ + MLP(h) with a 3-wide output.
template <class Real>
Var<Real> regress_and_update(const Var<Real>& h, const Var<Real>& reconstructed, const PipelineConfig& cfg,
                             ParamBank<Real>& bank) {
  require(h.rows() == reconstructed.rows(), "regress_and_update: row counts differ");
  auto hidden = ad::leaky_relu(linear(h, bank, "regressor.0"), static_cast<Real>(cfg.slope));
  return ad::add(reconstructed, linear(hidden, bank, "regressor.1"));
}

/// State of one cloud across iterations.
template <class Real = double>
struct SideState {
  LocalFrame<Real> frame;
  Var<Real> feats;
  Var<Real> flow;
  SuperpointSet<Real> centers;
  Var<Real> hidden;
};

template <class Real = double>
struct SideIteration {
  Var<Real> flow;  // F^t
  SuperpointSet<Real> centers;
  AssociationMap<Real> assoc;
  IterationContext<Real> context;
  Var<Real> hidden;
};

template <class Real = double>
struct IterationOutput {
  SideIteration<Real> p;
  SideIteration<Real> q;
};

template <class Real = double>
struct PipelineResult {
  Var<Real> x, y;
  TransportPlan<Real> plan;
  Var<Real> fp0, fq0;
  SuperpointSet<Real> sp_p0, sp_q0;
  std::vector<IterationOutput<Real>> iterations;

  const Var<Real>& final_p() const { return iterations.back().p.flow; }
  const Var<Real>& final_q() const { return iterations.back().q.flow; }
};

using TraceSink = std::function<void(const nlohmann::json&)>;

struct PipelineOptions {
  bool check_invariants = false;  // association rows, confidence range, hidden bound
  TraceSink trace;
};

namespace detail {

template <class Real>
void check_invariants(const SideIteration<Real>& s, const std::string& side, std::size_t t) {
  const auto tag = side + " iteration " + std::to_string(t);
  const auto& w = s.assoc.weights.value();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double total = 0;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (!(w(i, j) >= 0 && w(i, j) <= 1)) throw NumericError("invariant: association weight outside [0,1], " + tag);
      total += w(i, j);
    }
    if (std::abs(total - 1.0) > 1e-6) throw NumericError("invariant: association row sum != 1, " + tag);
  }
  for (auto c : s.context.confidence.value().values())
    if (!(c >= 0 && c <= 1)) throw NumericError("invariant: confidence outside [0,1], " + tag);
  for (auto h : s.hidden.value().values())
    if (!(std::abs(h) < 1)) throw NumericError("invariant: hidden state sup-norm >= 1, " + tag);
}

template <class Real>
double mean_row_norm(const Tensor<Real>& f) {
  double acc = 0;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    double s = 0;
    for (auto v : f.row(i)) s += static_cast<double>(v) * static_cast<double>(v);
    acc += std::sqrt(s);
  }
  return f.rows() ? acc / static_cast<double>(f.rows()) : 0.0;
}

template <class Real>
double association_entropy(const Tensor<Real>& w) {
  double acc = 0;
  for (auto v : w.values())
    if (v > 0) acc -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return w.rows() ? acc / static_cast<double>(w.rows()) : 0.0;
}

}  // namespace detail

/// Initialization followed by T rounds of superpoint generation and
/// superpoint-guided GRU refinement, symmetrically for P and Q.
template <class Real>
PipelineResult<Real> run_pipeline(const PointCloud<Real>& p, const PointCloud<Real>& q, const PipelineConfig& cfg,
                                  ParamBank<Real>& bank, const PipelineOptions& opts = {}) {
  cfg.validate();
  require(cfg.superpoints <= p.size() && cfg.superpoints <= q.size(),
          "run_pipeline: L exceeds the point count of an input cloud");
  auto& tape = bank.tape();
  auto stage = [](const Var<Real>& v, const std::string& name) -> const Var<Real>& {
    return ad::check_finite(v, name);
  };

  PipelineResult<Real> out;
  SideState<Real> sp{LocalFrame<Real>(p, cfg.encoder.k_conv), {}, {}, {}, {}};
  SideState<Real> sq{LocalFrame<Real>(q, cfg.encoder.k_conv), {}, {}, {}, {}};
  out.x = stage(encode(sp.frame, cfg.encoder, bank), "encoder(P)");
  out.y = stage(encode(sq.frame, cfg.encoder, bank), "encoder(Q)");
  sp.feats = out.x;
  sq.feats = out.y;

  const auto kernel = correlation_kernel(out.x, out.y, cfg.sinkhorn_epsilon);
  stage(kernel.plan, "correlation");
  out.plan = sinkhorn(kernel, cfg.sinkhorn_iterations);
  stage(out.plan.plan, "sinkhorn");
  std::tie(out.fp0, out.fq0) = bidirectional_initial_flow(out.plan.plan, p, q);
  stage(out.fp0, "initial_flow(P)");
  stage(out.fq0, "initial_flow(Q)");
  sp.flow = out.fp0;
  sq.flow = out.fq0;
  sp.centers = out.sp_p0 = init_superpoints(p, sp.flow, sp.feats, cfg.superpoints);
  sq.centers = out.sp_q0 = init_superpoints(q, sq.flow, sq.feats, cfg.superpoints);
  sp.hidden = tape.constant(Tensor<Real>(p.size(), cfg.hidden_dim));
  sq.hidden = tape.constant(Tensor<Real>(q.size(), cfg.hidden_dim));

  std::pair<double, double> marg{0, 0};
  if (opts.trace) marg = marginal_deviation(out.plan.plan.value());

  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const auto tag = [t](const char* op, const char* side) {
      return std::string(op) + "(" + side + ")@" + std::to_string(t);
    };
    IterationOutput<Real> it;
    // Superpoint generation for both clouds from the previous flows.
    auto generate = [&](SideState<Real>& self, const SideState<Real>& other, SideIteration<Real>& rec,
                        const char* side) {
      auto warped = warp_correspondences(self.frame.cloud, self.flow, self.centers, other.frame.cloud, other.feats);
      rec.assoc = association(self.frame.cloud, self.feats, self.centers, warped, cfg.knn, cfg.assoc, bank);
      stage(rec.assoc.weights, tag("association", side));
      rec.centers = update_centers(rec.assoc, self.frame.cloud, self.flow, self.feats, self.centers);
      stage(rec.centers.descriptors, tag("update_centers", side));
      rec.context.reconstructed = stage(reconstruct_flow(rec.assoc, rec.centers), tag("reconstruct", side));
    };
    generate(sp, sq, it.p, "P");
    generate(sq, sp, it.q, "Q");

    auto [cp, cq] = consistency_confidence(it.p.context.reconstructed, it.q.context.reconstructed, p, q, cfg, bank);
    stage(cp, tag("confidence", "P"));
    stage(cq, tag("confidence", "Q"));

    auto refine = [&](SideState<Real>& self, const SideState<Real>& other, SideIteration<Real>& rec,
                      const Var<Real>& conf, const char* side) {
      rec.context = iteration_context(rec.context.reconstructed, conf, self.frame, self.feats, other.frame.cloud,
                                      other.feats, cfg, bank);
      stage(rec.context.v, tag("context", side));
      rec.hidden = stage(gru_step(self.hidden, rec.context.v, self.frame, cfg, bank), tag("gru", side));
      rec.flow = stage(regress_and_update(rec.hidden, rec.context.reconstructed, cfg, bank), tag("regress", side));
      self.flow = rec.flow;
      self.centers = rec.centers;
      self.hidden = rec.hidden;
    };
    refine(sp, sq, it.p, cp, "P");
    refine(sq, sp, it.q, cq, "Q");

    if (opts.check_invariants) {
      detail::check_invariants(it.p, "P", t);
      detail::check_invariants(it.q, "Q", t);
    }
    if (opts.trace) {
      for (const auto* side : {&it.p, &it.q}) {
        double hsup = 0;
        for (auto v : side->hidden.value().values()) hsup = std::max(hsup, std::abs(static_cast<double>(v)));
        double cmean = 0;
        for (auto v : side->context.confidence.value().values()) cmean += static_cast<double>(v);
        cmean /= static_cast<double>(side->context.confidence.rows());
        opts.trace(nlohmann::json{{"iteration", t},
                                  {"side", side == &it.p ? "P" : "Q"},
                                  {"flow_norm_mean", detail::mean_row_norm(side->flow.value())},
                                  {"reconstructed_norm_mean", detail::mean_row_norm(side->context.reconstructed.value())},
                                  {"association_entropy", detail::association_entropy(side->assoc.weights.value())},
                                  {"confidence_mean", cmean},
                                  {"hidden_sup", hsup},
                                  {"sinkhorn_row_deviation", marg.first},
                                  {"sinkhorn_col_deviation", marg.second}});
      }
    }
    out.iterations.push_back(std::move(it));
  }
  return out;
}

/// Self-supervised objective summed over all iterations with equal weight.
template <class Real>
Var<Real> pipeline_loss(const PipelineResult<Real>& result, const PointCloud<Real>& p, const PointCloud<Real>& q,
                        const LossConfig& cfg, LossReport* report = nullptr) {
  std::optional<Var<Real>> total;
  LossReport acc{0, 0, 0, 0, cfg.alpha, cfg.beta};
  for (const auto& it : result.iterations) {
    auto terms = flow_losses(p, q, it.p.flow, it.q.flow, cfg);
    total = total ? ad::add(*total, terms.total) : terms.total;
    const auto r = terms.report(cfg.alpha, cfg.beta);
    acc.chamfer += r.chamfer;
    acc.smoothness += r.smoothness;
    acc.consistency += r.consistency;
    acc.total += r.total;
  }
  ad::check_finite(*total, "loss");
  if (report) *report = acc;
  return *total;
}

}  // namespace spflow
