// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "tensor.hpp"

namespace spflow {

/// End-point error (m) and the three threshold percentages.
struct MetricsReport {
  double epe = 0;
  double as_pct = 0;
  double ar_pct = 0;
  double out_pct = 0;
};

struct MetricThresholds {
  double strict_abs = 0.05, strict_rel = 0.05;
  double relax_abs = 0.10, relax_rel = 0.10;
  double outlier_abs = 0.30, outlier_rel = 0.10;
};

/// Per-point EPE averaged over all points. A point with zero ground-truth
/// motion has no relative error; only the absolute tests apply to it.
/// All threshold comparisons are strict.
template <class Real>
MetricsReport evaluate(const Tensor<Real>& flow, const Tensor<Real>& gt, const MetricThresholds& th = {}) {
  require(flow.same_shape(gt) && flow.cols() == 3, "evaluate: prediction " + flow.shape_string() +
                                                       " and ground truth " + gt.shape_string() + " differ");
  require(flow.rows() > 0, "evaluate: empty flow");
  double epe_sum = 0;
  std::size_t strict = 0, relax = 0, outliers = 0;
  for (std::size_t i = 0; i < flow.rows(); ++i) {
    double e2 = 0, g2 = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = static_cast<double>(flow(i, c)) - static_cast<double>(gt(i, c));
      e2 += d * d;
      g2 += static_cast<double>(gt(i, c)) * static_cast<double>(gt(i, c));
    }
    const double epe = std::sqrt(e2);
    const double gn = std::sqrt(g2);
    const bool has_rel = gn > 0;
    const double rel = has_rel ? epe / gn : 0;
    epe_sum += epe;
    if (epe < th.strict_abs || (has_rel && rel < th.strict_rel)) ++strict;
    if (epe < th.relax_abs || (has_rel && rel < th.relax_rel)) ++relax;
    if (epe > th.outlier_abs || (has_rel && rel > th.outlier_rel)) ++outliers;
  }
  const double n = static_cast<double>(flow.rows());
  return {epe_sum / n, 100.0 * strict / n, 100.0 * relax / n, 100.0 * outliers / n};
}

inline nlohmann::json to_json(const MetricsReport& m) {
  return nlohmann::json{{"epe", m.epe}, {"as", m.as_pct}, {"ar", m.ar_pct}, {"out", m.out_pct}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m{j.at("epe").get<double>(), j.at("as").get<double>(), j.at("ar").get<double>(),
                  j.at("out").get<double>()};
  return m;
}

}  // namespace spflow
