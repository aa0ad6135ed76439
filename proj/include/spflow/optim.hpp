// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"
#include "parameters.hpp"

namespace spflow {

struct OptimConfig {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<int> decay_epochs{40, 55, 70};
  double decay_factor = 0.7;
  int total_epochs = 100;

  void validate() const {
    require(base_lr > 0, "OptimConfig: base learning rate must be positive");
    require(decay_factor > 0 && decay_factor <= 1, "OptimConfig: decay factor must lie in (0, 1]");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "OptimConfig: betas must lie in [0, 1)");
    require(epsilon > 0, "OptimConfig: epsilon must be positive");
    require(total_epochs >= 1, "OptimConfig: total epochs must be >= 1");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i)
      require(decay_epochs[i] > decay_epochs[i - 1], "OptimConfig: decay epochs must be strictly increasing");
  }
};

/// Step schedule: base rate times factor^(number of decay epochs <= epoch).
inline double lr_at_epoch(const OptimConfig& cfg, int epoch) {
  cfg.validate();
  require(epoch >= 0 && epoch < cfg.total_epochs,
          "lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs) + ")");
  double lr = cfg.base_lr;
  for (int e : cfg.decay_epochs)
    if (e <= epoch) lr *= cfg.decay_factor;
  return lr;
}

/// One bias-corrected ADAM update over every parameter, then zeroes gradients.
template <class Real>
void adam_step(ParameterStore<Real>& store, double lr, const OptimConfig& cfg = {}) {
  require(lr > 0, "adam_step: learning rate must be positive");
  const auto t = static_cast<double>(store.step() + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& e : store.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double m = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      e.first_moment[i] = static_cast<Real>(m);
      e.second_moment[i] = static_cast<Real>(v);
      const double m_hat = m / c1;
      const double v_hat = v / c2;
      e.value[i] = static_cast<Real>(e.value[i] - lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
  }
  store.set_step(store.step() + 1);
  store.zero_grad();
}

}  // namespace spflow
