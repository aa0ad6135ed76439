// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "losses.hpp"
#include "refinement.hpp"

namespace spflow {

/// One named finite-difference check and the tolerance it must meet.
struct GradCheckCase {
  std::string module;
  std::string name;
  double tolerance;
  std::function<GradCheckReport()> run;
};

inline constexpr double kSmoothOpTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-3;

namespace detail {

inline PointCloud<double> random_cloud(std::size_t n, Rng& rng, double half_extent = 1.0) {
  return PointCloud<double>(random_tensor(n, 3, rng, -half_extent, half_extent));
}

/// Small configuration for module-level checks: narrow widths keep the
/// number of probed parameters low.
inline PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.superpoints = 4;
  cfg.knn = 2;
  cfg.iterations = 2;
  cfg.encoder.widths = {4, 6};
  cfg.encoder.k_conv = 4;
  cfg.assoc.hidden = 4;
  cfg.hidden_dim = 5;
  cfg.embed_k = 4;
  cfg.confidence_hidden = 4;
  cfg.regressor_hidden = 4;
  cfg.loss.smooth_k = 4;
  return cfg;
}

using Vars = std::vector<Var<double>>;

inline GradCheckCase op_case(const std::string& name, std::vector<Tensor<double>> inputs,
                             std::function<Var<double>(Tape<double>&, const Vars&)> body) {
  return {"numeric-core", name, kSmoothOpTolerance, [name, inputs, body] {
            return check_input_gradients(
                name, [body](Tape<double>& t, const Vars& v) { return random_projection(body(t, v), 17); }, inputs);
          }};
}

inline std::vector<GradCheckCase> numeric_core_cases(Rng& rng) {
  auto r = [&](std::size_t a, std::size_t b, double lo = -1, double hi = 1) { return random_tensor(a, b, rng, lo, hi); };
  std::vector<GradCheckCase> c;
  c.push_back(op_case("matmul", {r(3, 4), r(4, 2)}, [](auto&, const Vars& v) { return ad::matmul(v[0], v[1]); }));
  c.push_back(op_case("add", {r(3, 2), r(3, 2)}, [](auto&, const Vars& v) { return ad::add(v[0], v[1]); }));
  c.push_back(op_case("sub", {r(3, 2), r(3, 2)}, [](auto&, const Vars& v) { return ad::sub(v[0], v[1]); }));
  c.push_back(op_case("mul", {r(3, 2), r(3, 2)}, [](auto&, const Vars& v) { return ad::mul(v[0], v[1]); }));
  c.push_back(op_case("add_row", {r(3, 2), r(1, 2)}, [](auto&, const Vars& v) { return ad::add_row(v[0], v[1]); }));
  c.push_back(op_case("mul_col", {r(3, 2), r(3, 1)}, [](auto&, const Vars& v) { return ad::mul_col(v[0], v[1]); }));
  c.push_back(op_case("mul_row", {r(3, 2), r(1, 2)}, [](auto&, const Vars& v) { return ad::mul_row(v[0], v[1]); }));
  c.push_back(op_case("scale", {r(3, 2)}, [](auto&, const Vars& v) { return ad::scale(v[0], 0.7); }));
  c.push_back(op_case("add_scalar", {r(3, 2)}, [](auto&, const Vars& v) { return ad::add_scalar(v[0], 0.3); }));
  c.push_back(op_case("neg", {r(3, 2)}, [](auto&, const Vars& v) { return ad::neg(v[0]); }));
  c.push_back(op_case("sigmoid", {r(3, 2)}, [](auto&, const Vars& v) { return ad::sigmoid(v[0]); }));
  c.push_back(op_case("tanh", {r(3, 2)}, [](auto&, const Vars& v) { return ad::tanh(v[0]); }));
  c.push_back(op_case("exp", {r(3, 2)}, [](auto&, const Vars& v) { return ad::exp(v[0]); }));
  c.push_back(op_case("reciprocal", {r(3, 2, 0.5, 1.5)}, [](auto&, const Vars& v) { return ad::reciprocal(v[0]); }));
  c.push_back(op_case("leaky_relu", {r(3, 4)}, [](auto&, const Vars& v) { return ad::leaky_relu(v[0], 0.1); }));
  c.push_back(op_case("exp_clamped", {r(3, 4, -2, 2)},
                      [](auto&, const Vars& v) { return ad::exp_clamped(v[0], -1.5, 1.5); }));
  c.push_back(op_case("sum", {r(3, 2)}, [](auto&, const Vars& v) { return ad::sum(v[0]); }));
  c.push_back(op_case("row_sum", {r(3, 2)}, [](auto&, const Vars& v) { return ad::row_sum(v[0]); }));
  c.push_back(op_case("col_sum", {r(3, 2)}, [](auto&, const Vars& v) { return ad::col_sum(v[0]); }));
  c.push_back(op_case("row_norm", {r(4, 3)}, [](auto&, const Vars& v) { return ad::row_norm(v[0]); }));
  c.push_back(op_case("softmax_rows", {r(3, 4)}, [](auto&, const Vars& v) { return ad::softmax_rows(v[0]); }));
  c.push_back(op_case("concat_cols", {r(3, 2), r(3, 1)},
                      [](auto&, const Vars& v) { return ad::concat_cols(v[0], v[1]); }));
  c.push_back(op_case("slice_cols", {r(3, 4)}, [](auto&, const Vars& v) { return ad::slice_cols(v[0], 1, 3); }));
  c.push_back(op_case("slice_rows", {r(4, 3)}, [](auto&, const Vars& v) { return ad::slice_rows(v[0], 1, 3); }));
  c.push_back(op_case("gather_rows", {r(3, 2)},
                      [](auto&, const Vars& v) { return ad::gather_rows(v[0], Index{2, 0, 2, 1}); }));
  c.push_back(op_case("scatter_add_rows", {r(4, 2)},
                      [](auto&, const Vars& v) { return ad::scatter_add_rows(v[0], Index{1, 0, 1, 2}, 3); }));
  c.push_back(op_case("group_max", {r(6, 3)}, [](auto&, const Vars& v) { return ad::group_max(v[0], 3); }));
  c.push_back(op_case("neighborhood_max", {r(3, 4), r(6, 3), r(3, 4), r(1, 4)}, [](auto&, const Vars& v) {
    return ad::neighborhood_max<double>({{v[0], Index{0, 2, 1, 1, 2, 0}}}, v[1], v[2], v[3], 2, true, 0.1);
  }));
  c.push_back(op_case("select_rows", {r(3, 2), r(3, 2)},
                      [](auto&, const Vars& v) { return ad::select_rows({true, false, true}, v[0], v[1]); }));
  c.push_back(op_case("transpose", {r(3, 2)}, [](auto&, const Vars& v) { return ad::transpose(v[0]); }));
  c.push_back(op_case("reshape", {r(3, 2)}, [](auto&, const Vars& v) { return ad::reshape(v[0], 2, 3); }));
  return c;
}

}  // namespace detail

/// Every gradient check, grouped by module. `seed` fixes all random inputs.
inline std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases = detail::numeric_core_cases(rng);
  const auto cfg = detail::small_config();
  const std::size_t n = 10, m = 9;
  const auto p = detail::random_cloud(n, rng);
  const auto q = detail::random_cloud(m, rng);
  const std::size_t d = cfg.feature_dim();
  const auto x0 = random_tensor(n, d, rng);
  const auto y0 = random_tensor(m, d, rng);
  const auto fp0 = random_tensor(n, 3, rng, -0.3, 0.3);
  const auto fq0 = random_tensor(m, 3, rng, -0.3, 0.3);
  const auto h0 = random_tensor(n, cfg.hidden_dim, rng, -0.5, 0.5);
  const auto v0 = random_tensor(n, cfg.hidden_dim, rng);
  const auto conf0 = random_tensor(n, 1, rng, 0.1, 0.9);
  const std::uint64_t pseed = rng.next();
  using detail::Vars;

  auto input_case = [&](const std::string& module, const std::string& name, double tol,
                        std::vector<Tensor<double>> inputs, InputFunction fn) {
    cases.push_back({module, name, tol, [name, inputs, fn] { return check_input_gradients(name, fn, inputs); }});
  };
  // Parameter checks build their own store with `setup` and evaluate `fn`.
  auto param_case = [&](const std::string& module, const std::string& name,
                        std::function<void(ParameterStore<double>&, Rng&)> setup,
                        std::function<Var<double>(ParamBank<double>&)> fn) {
    cases.push_back({module, name, kCompositeTolerance, [name, setup, fn, pseed] {
                       ParameterStore<double> store;
                       Rng r(pseed);
                       setup(store, r);
                       return check_parameter_gradients(name, store, fn);
                     }});
  };

  // pointcloud-geometry
  input_case("pointcloud-geometry", "interpolate(values, source)", kSmoothOpTolerance, {fq0, q.coords()},
             [p](Tape<double>&, const Vars& v) { return random_projection(interpolate(v[0], v[1], p.coords()), 3); });
  input_case("pointcloud-geometry", "backward_flow", kSmoothOpTolerance, {fq0},
             [p, q](Tape<double>&, const Vars& v) { return random_projection(backward_flow(v[0], q, p), 4); });

  // feature-encoder
  param_case(
      "feature-encoder", "set_conv(parameters)",
      [cfg](auto& s, Rng& r) {
        SetConvParams sp{"conv", 3, {5}, cfg.encoder.k_conv, 0.1, true};
        sp.register_parameters(s, r);
      },
      [cfg, p, fp0](ParamBank<double>& bank) {
        LocalFrame<double> frame(p, cfg.encoder.k_conv);
        SetConvParams sp{"conv", 3, {5}, cfg.encoder.k_conv, 0.1, true};
        return random_projection(set_conv<double>(frame, bank.tape().constant(fp0), sp, bank), 5);
      });
  param_case(
      "feature-encoder", "set_conv(two layers)",
      [cfg](auto& s, Rng& r) {
        SetConvParams sp{"conv", 3, {4, 3}, cfg.encoder.k_conv, 0.1, false};
        sp.register_parameters(s, r);
      },
      [cfg, p, fp0](ParamBank<double>& bank) {
        LocalFrame<double> frame(p, cfg.encoder.k_conv);
        SetConvParams sp{"conv", 3, {4, 3}, cfg.encoder.k_conv, 0.1, false};
        return random_projection(set_conv<double>(frame, bank.tape().constant(fp0), sp, bank), 5);
      });
  param_case(
      "feature-encoder", "encode(parameters)", [cfg](auto& s, Rng& r) { cfg.encoder.register_parameters(s, r); },
      [cfg, p](ParamBank<double>& bank) {
        LocalFrame<double> frame(p, cfg.encoder.k_conv);
        return random_projection(encode(frame, cfg.encoder, bank), 6);
      });
  input_case("feature-encoder", "set_conv(features)", kSmoothOpTolerance, {fp0},
             [cfg, p, pseed](Tape<double>& t, const Vars& v) {
               ParameterStore<double> s;
               Rng r(pseed);
               SetConvParams sp{"conv", 3, {5}, cfg.encoder.k_conv, 0.1, true};
               sp.register_parameters(s, r);
               ParamBank<double> bank(t, s);
               bind_as_constants(bank);
               LocalFrame<double> frame(p, cfg.encoder.k_conv);
               return random_projection(set_conv<double>(frame, v[0], sp, bank), 7);
             });
  input_case("feature-encoder", "neighborhood features", kSmoothOpTolerance, {fp0, random_tensor(3, 5, rng)},
             [cfg, p](Tape<double>& t, const Vars& v) {
               LocalFrame<double> frame(p, cfg.encoder.k_conv);
               auto zero_bias = t.constant(Tensor<double>(1, 5));
               std::vector<ad::GatherTerm<double>> terms{{ad::matmul(v[0], v[1]), frame.neighbors}};
               return random_projection(
                   ad::neighborhood_max(terms, t.constant(frame.rel_coords), v[1], zero_bias, frame.k, true, 0.1), 8);
             });

  // transport-init
  input_case("transport-init", "correlation_kernel", kSmoothOpTolerance, {x0, y0}, [](Tape<double>&, const Vars& v) {
    return random_projection(correlation_kernel(ad::scale(v[0], 0.2), ad::scale(v[1], 0.2), 0.03).plan, 9);
  });
  input_case("transport-init", "sinkhorn", kSmoothOpTolerance, {random_tensor(n, m, rng, 0.2, 2.0)},
             [](Tape<double>&, const Vars& v) {
               return random_projection(sinkhorn(TransportPlan<double>{v[0], 0.03, 0}, 10).plan, 10);
             });
  input_case("transport-init", "initial_flow", kSmoothOpTolerance, {random_tensor(n, m, rng, 0.1, 1.0)},
             [p, q](Tape<double>&, const Vars& v) { return random_projection(initial_flow(v[0], p, q), 11); });
  input_case("transport-init", "features -> initial flow", kCompositeTolerance, {x0, y0},
             [p, q](Tape<double>&, const Vars& v) {
               auto plan = sinkhorn(correlation_kernel(ad::scale(v[0], 0.2), ad::scale(v[1], 0.2), 0.03), 10);
               auto [a, b] = bidirectional_initial_flow(plan.plan, p, q);
               return ad::add(random_projection(a, 12), random_projection(b, 13));
             });

  // superpoint-generation
  auto superpoint_round = [cfg, p, q](Tape<double>& t, ParamBank<double>& bank, const Var<double>& x,
                                      const Var<double>& y, const Var<double>& flow) {
    auto centers = init_superpoints(p, flow, x, cfg.superpoints);
    auto warped = warp_correspondences(p, flow, centers, q, y);
    auto assoc = association(p, x, centers, warped, cfg.knn, cfg.assoc, bank);
    auto updated = update_centers(assoc, p, flow, x, centers);
    auto recon = reconstruct_flow(assoc, updated);
    (void)t;
    return ad::add(ad::add(random_projection(assoc.weights, 14), random_projection(updated.descriptors, 15)),
                   ad::add(random_projection(updated.coords, 16), random_projection(recon, 18)));
  };
  param_case(
      "superpoint-generation", "association + update + reconstruct (parameters)",
      [cfg, d](auto& s, Rng& r) { cfg.assoc.register_parameters(s, d, r); },
      [superpoint_round, x0, y0, fp0](ParamBank<double>& bank) {
        auto& t = bank.tape();
        return superpoint_round(t, bank, t.constant(x0), t.constant(y0), t.constant(fp0));
      });
  input_case("superpoint-generation", "association + update + reconstruct (inputs)", kCompositeTolerance,
             {x0, y0, fp0}, [superpoint_round, cfg, d, pseed](Tape<double>& t, const Vars& v) {
               ParameterStore<double> s;
               Rng r(pseed);
               cfg.assoc.register_parameters(s, d, r);
               ParamBank<double> bank(t, s);
               bind_as_constants(bank);
               return superpoint_round(t, bank, v[0], v[1], v[2]);
             });

  // flow-refinement
  param_case(
      "flow-refinement", "consistency_confidence",
      [](auto& s, Rng& r) {
        for (const char* side : {"conf_p", "conf_q"}) {
          add_linear(s, std::string(side) + ".0", 3, 4, r);
          add_linear(s, std::string(side) + ".1", 4, 1, r);
        }
      },
      [cfg, p, q, fp0, fq0](ParamBank<double>& bank) {
        auto& t = bank.tape();
        auto [cp, cq] = consistency_confidence(t.constant(fp0), t.constant(fq0), p, q, cfg, bank);
        return ad::add(random_projection(cp, 19), random_projection(cq, 20));
      });
  param_case(
      "flow-refinement", "iteration_context",
      [cfg, d](auto& s, Rng& r) {
        add_linear(s, "embed.0", 2 * d + 3, cfg.hidden_dim, r);
        add_linear(s, "flow_linear", 3, cfg.hidden_dim, r);
        cfg.context_conv("context_c").register_parameters(s, r);
        cfg.context_conv("context_e").register_parameters(s, r);
      },
      [cfg, p, q, x0, y0, fp0, conf0](ParamBank<double>& bank) {
        auto& t = bank.tape();
        LocalFrame<double> frame(p, cfg.encoder.k_conv);
        auto ctx = iteration_context(t.constant(fp0), t.constant(conf0), frame, t.constant(x0), q, t.constant(y0),
                                     cfg, bank);
        return random_projection(ctx.v, 21);
      });
  param_case(
      "flow-refinement", "gru_step",
      [cfg](auto& s, Rng& r) {
        for (const char* gate : {"gru_z", "gru_r", "gru_h"}) cfg.gru_conv(gate).register_parameters(s, r);
      },
      [cfg, p, h0, v0](ParamBank<double>& bank) {
        auto& t = bank.tape();
        LocalFrame<double> frame(p, cfg.encoder.k_conv);
        return random_projection(gru_step(t.constant(h0), t.constant(v0), frame, cfg, bank), 22);
      });
  param_case(
      "flow-refinement", "regress_and_update",
      [cfg](auto& s, Rng& r) {
        add_linear(s, "regressor.0", cfg.hidden_dim, cfg.regressor_hidden, r);
        add_linear(s, "regressor.1", cfg.regressor_hidden, 3, r);
      },
      [cfg, h0, fp0](ParamBank<double>& bank) {
        auto& t = bank.tape();
        return random_projection(regress_and_update(t.constant(h0), t.constant(fp0), cfg, bank), 23);
      });

  // losses-metrics
  input_case("losses-metrics", "chamfer_loss", kSmoothOpTolerance, {fp0}, [p, q](Tape<double>& t, const Vars& v) {
    return chamfer_loss(ad::add(t.constant(p.coords()), v[0]), q);
  });
  input_case("losses-metrics", "smoothness_loss", kSmoothOpTolerance, {fp0},
             [p](Tape<double>&, const Vars& v) { return smoothness_loss(p, v[0], 4); });
  input_case("losses-metrics", "consistency_loss", kSmoothOpTolerance, {fp0, fq0},
             [p, q](Tape<double>&, const Vars& v) { return consistency_loss(v[0], v[1], p, q); });
  input_case("losses-metrics", "flow_losses", kSmoothOpTolerance, {fp0, fq0}, [p, q, cfg](Tape<double>&,
                                                                                        const Vars& v) {
    return flow_losses(p, q, v[0], v[1], cfg.loss).total;
  });
  return cases;
}

/// The full self-supervised loss at T = 2 on a small pair, checked with
/// respect to every parameter of the default-width model.
inline GradCheckCase end_to_end_case(std::size_t points = 14, std::uint64_t seed = 11) {
  return {"end-to-end", "pipeline loss (T=2, " + std::to_string(points) + " points)", kCompositeTolerance,
          [points, seed] {
            PipelineConfig cfg;
            cfg.superpoints = 4;
            cfg.knn = 2;
            cfg.iterations = 2;
            Rng rng(seed);
            const auto p = detail::random_cloud(points, rng, 0.5);
            auto shifted = p.coords();
            for (auto& v : shifted.values()) v += rng.uniform(-0.1, 0.1);
            const PointCloud<double> q(shifted);
            auto store = init_parameters<double>(cfg, seed);
            return check_parameter_gradients("end-to-end", store, [&](ParamBank<double>& bank) {
              auto result = run_pipeline(p, q, cfg, bank);
              return pipeline_loss(result, p, q, cfg.loss);
            });
          }};
}

inline std::vector<std::string> gradcheck_modules() {
  return {"numeric-core",          "pointcloud-geometry", "feature-encoder", "transport-init",
          "superpoint-generation", "flow-refinement",     "losses-metrics",  "end-to-end"};
}

/// All cases of one module ("all" selects everything).
inline std::vector<GradCheckCase> gradcheck_cases(const std::string& module, std::uint64_t seed = 7) {
  auto all = gradcheck_suite(seed);
  all.push_back(end_to_end_case());
  if (module == "all") return all;
  std::vector<GradCheckCase> out;
  for (auto& c : all)
    if (c.module == module) out.push_back(std::move(c));
  require(!out.empty(), "gradcheck: unknown module '" + module + "'");
  return out;
}

}  // namespace spflow
