// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "layers.hpp"

namespace spflow {

struct GradCheckOptions {
  double step = 1e-5;
  double floor = 1e-3;  // denominator floor for the relative error
};

/// Outcome of comparing reverse-mode gradients with finite differences.
/// `refined` entries needed a smaller central step to stay clear of a kink,
/// `one_sided` entries fell back to a one-sided difference, and `skipped`
/// entries had kinks within reach on both sides.
struct GradCheckReport {
  std::string name;
  std::size_t checked = 0;
  std::size_t refined = 0;
  std::size_t one_sided = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0;
  std::string worst;  // "input[entry]" of the largest error

  bool passed(double tolerance) const { return checked > 0 && max_rel_error < tolerance; }
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

struct Probe {
  double value;
  std::uint64_t signature;
};

/// Numeric derivative of `eval(offset)` at offset 0. A probe whose signature
/// differs from the center's crossed a kink: the central difference is then
/// retried with steps shrunk by 10 and 100, and as a last resort a
/// second-order one-sided difference is taken on a clean side.
template <class Eval>
void probe_entry(GradCheckReport& rep, const std::string& where, double analytic, const Probe& center, Eval eval,
                 const GradCheckOptions& opt) {
  auto clean = [&](const Probe& pr) { return pr.signature == center.signature; };
  double numeric = 0;
  bool found = false;
  for (double h = opt.step; h >= opt.step / 100 * 0.99 && !found; h /= 10) {
    const auto plus = eval(h), minus = eval(-h);
    if (clean(plus) && clean(minus)) {
      numeric = (plus.value - minus.value) / (2 * h);
      found = true;
      if (h < opt.step) ++rep.refined;
    }
  }
  if (!found) {
    for (double dir : {1.0, -1.0}) {
      const auto one = eval(dir * opt.step), two = eval(2 * dir * opt.step);
      if (clean(one) && clean(two)) {
        numeric = dir * (-3 * center.value + 4 * one.value - two.value) / (2 * opt.step);
        found = true;
        ++rep.one_sided;
        break;
      }
    }
  }
  if (!found) {
    ++rep.skipped;
    return;
  }
  ++rep.checked;
  const double err = gradient_relative_error(analytic, numeric, opt.floor);
  if (rep.checked == 1 || err > rep.max_rel_error) {
    rep.max_rel_error = err;
    rep.worst = where;
  }
}

}  // namespace detail

/// Scalar function of differentiable leaf inputs, rebuilt on a fresh tape for
/// every probe.
using InputFunction = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline GradCheckReport check_input_gradients(const std::string& name, const InputFunction& fn,
                                             std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
  auto run = [&](bool want_grads, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    auto out = fn(tape, vars);
    require(out.value().size() == 1, "gradcheck: function must return a scalar");
    if (want_grads) {
      tape.backward(out);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return detail::Probe{out.value().item(), tape.signature()};
  };
  std::vector<Tensor<double>> grads;
  const auto center = run(true, &grads);
  GradCheckReport rep;
  rep.name = name;
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    for (std::size_t e = 0; e < inputs[in].size(); ++e) {
      const double orig = inputs[in][e];
      auto eval = [&](double offset) {
        inputs[in][e] = orig + offset;
        auto pr = run(false, nullptr);
        inputs[in][e] = orig;
        return pr;
      };
      detail::probe_entry(rep, "input" + std::to_string(in) + "[" + std::to_string(e) + "]", grads[in][e], center,
                          eval, opt);
    }
  }
  return rep;
}

/// Scalar function of the parameters in a store.
using ParameterFunction = std::function<Var<double>(ParamBank<double>&)>;

inline GradCheckReport check_parameter_gradients(const std::string& name, ParameterStore<double>& store,
                                                 const ParameterFunction& fn, const GradCheckOptions& opt = {}) {
  auto run = [&](bool want_grads) {
    Tape<double> tape;
    ParamBank<double> bank(tape, store);
    auto out = fn(bank);
    require(out.value().size() == 1, "gradcheck: function must return a scalar");
    if (want_grads) ad::backward(out, store);
    return detail::Probe{out.value().item(), tape.signature()};
  };
  const auto center = run(true);
  std::vector<Tensor<double>> grads;
  for (const auto& e : store.entries()) grads.push_back(e.grad);
  GradCheckReport rep;
  rep.name = name;
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& value = store.entries()[p].value;
    for (std::size_t e = 0; e < value.size(); ++e) {
      const double orig = value[e];
      auto eval = [&](double offset) {
        value[e] = orig + offset;
        auto pr = run(false);
        value[e] = orig;
        return pr;
      };
      detail::probe_entry(rep, store.entries()[p].name + "[" + std::to_string(e) + "]", grads[p][e], center, eval,
                          opt);
    }
  }
  store.zero_grad();
  return rep;
}

/// Binds every parameter of the bank's store as a constant leaf, so later
/// uses through the bank carry no gradient.
inline void bind_as_constants(ParamBank<double>& bank) {
  auto& tape = bank.tape();
  const bool was = tape.grad_enabled();
  tape.set_grad_enabled(false);
  for (const auto& e : bank.store().entries()) bank(e.name);
  tape.set_grad_enabled(was);
}

/// sum(out * R) for a fixed pseudo-random R, reducing any op output to a
/// scalar whose gradient exercises every output entry.
inline Var<double> random_projection(const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> r(out.rows(), out.cols());
  for (auto& v : r.values()) v = rng.uniform(-1, 1);
  return ad::sum(ad::mul(out, out.tape().constant(std::move(r))));
}

/// Tensor with entries uniform in [lo, hi].
inline Tensor<double> random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(rows, cols);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace spflow
