// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"
#include "random.hpp"

namespace spflow {

/// A frame pair with optional ground truth on the source frame.
template <class Real = double>
struct ScenePair {
  PointCloud<Real> source;
  PointCloud<Real> target;
  std::optional<FlowField<Real>> gt_flow;
  std::optional<std::vector<std::int32_t>> part_labels;

  void validate() const {
    if (gt_flow)
      require(gt_flow->rows() == source.size() && gt_flow->cols() == 3, "ScenePair: gt_flow must be n_source x 3");
    if (part_labels) require(part_labels->size() == source.size(), "ScenePair: one part label per source point");
  }
};

/// Rigid boxes side by side along x, each moved by its own rotation (random
/// axis, angle uniform in [-max_rotation, max_rotation], about the part
/// centroid) followed by a translation drawn per axis from
/// [translation_min, translation_max].
struct SyntheticConfig {
  std::size_t parts = 2;
  std::size_t points_per_part = 256;
  double extent = 1.0;      // box edge length (m)
  double separation = 1.0;  // gap between neighbouring boxes (m)
  std::array<double, 3> translation_min{-0.28, -0.28, -0.28};
  std::array<double, 3> translation_max{0.28, 0.28, 0.28};
  double max_rotation = 15.0 * 3.14159265358979323846 / 180.0;  // radians
  double noise_sigma = 0.002;                                    // m
  std::uint64_t seed = 0;

  void validate() const {
    require(parts >= 1, "SyntheticConfig: part count must be >= 1");
    require(points_per_part >= 1, "SyntheticConfig: points per part must be >= 1");
    require(extent >= 0 && separation >= 0 && max_rotation >= 0 && noise_sigma >= 0,
            "SyntheticConfig: ranges must be non-negative");
    for (std::size_t a = 0; a < 3; ++a)
      require(translation_min[a] <= translation_max[a], "SyntheticConfig: translation_min must not exceed translation_max");
  }
};

/// Rotation matrix for `angle` radians about the unit vector `axis`.
inline std::array<std::array<double, 3>, 3> axis_angle(const std::array<double, 3>& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

template <class Real = double>
ScenePair<Real> generate_scene(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.parts * cfg.points_per_part;
  Tensor<Real> src(n, 3), moved(n, 3), tgt(n, 3), gt(n, 3);
  std::vector<std::int32_t> labels(n);
  const double pitch = cfg.extent + cfg.separation;
  const double offset = 0.5 * pitch * static_cast<double>(cfg.parts - 1);

  for (std::size_t part = 0; part < cfg.parts; ++part) {
    const std::size_t begin = part * cfg.points_per_part;
    const std::array<double, 3> center{static_cast<double>(part) * pitch - offset, 0, 0};
    std::array<double, 3> centroid{0, 0, 0};
    for (std::size_t i = begin; i < begin + cfg.points_per_part; ++i) {
      labels[i] = static_cast<std::int32_t>(part);
      for (std::size_t a = 0; a < 3; ++a) {
        const double v = center[a] + cfg.extent * (rng.uniform() - 0.5);
        src(i, a) = static_cast<Real>(v);
        centroid[a] += static_cast<double>(src(i, a));
      }
    }
    for (auto& c : centroid) c /= static_cast<double>(cfg.points_per_part);

    std::array<double, 3> axis{rng.normal(), rng.normal(), rng.normal()};
    const double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    if (norm > 0)
      for (auto& v : axis) v /= norm;
    else
      axis = {0, 0, 1};
    const double angle = cfg.max_rotation * (2 * rng.uniform() - 1);
    const auto rot = axis_angle(axis, angle);
    std::array<double, 3> trans{};
    for (std::size_t a = 0; a < 3; ++a)
      trans[a] = cfg.translation_min[a] + (cfg.translation_max[a] - cfg.translation_min[a]) * rng.uniform();

    for (std::size_t i = begin; i < begin + cfg.points_per_part; ++i) {
      std::array<double, 3> rel{};
      for (std::size_t a = 0; a < 3; ++a) rel[a] = static_cast<double>(src(i, a)) - centroid[a];
      for (std::size_t a = 0; a < 3; ++a) {
        double d = trans[a] - rel[a];
        for (std::size_t b = 0; b < 3; ++b) d += rot[a][b] * rel[b];
        gt(i, a) = static_cast<Real>(angle == 0 ? trans[a] : d);
        moved(i, a) = src(i, a) + gt(i, a);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 3; ++a) {
      const double noise = cfg.noise_sigma > 0 ? cfg.noise_sigma * rng.normal() : 0.0;
      tgt(i, a) = static_cast<Real>(static_cast<double>(moved(i, a)) + noise);
    }
  ScenePair<Real> scene{PointCloud<Real>(std::move(src)), PointCloud<Real>(std::move(tgt)), std::move(gt),
                        std::move(labels)};
  scene.validate();
  return scene;
}

}  // namespace spflow
