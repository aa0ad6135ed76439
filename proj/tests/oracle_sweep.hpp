// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

/// Largest deviation between library and oracle over all instances of one
/// operation; index-valued outputs count any mismatch as infinite error.
struct SweepResult {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0;
};

namespace detail {

inline spflow::Tensor<double> random_points(std::size_t n, spflow::Rng& rng) {
  spflow::Tensor<double> t(n, 3);
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

inline std::size_t random_size(spflow::Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.index(hi - lo + 1));
}

inline void record(SweepResult& r, double err) {
  ++r.instances;
  r.max_error = std::max(r.max_error, err);
}

inline double index_error(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  return a == b ? 0.0 : std::numeric_limits<double>::infinity();
}

/// A random association map: K distinct centers per point, softmax-like weights.
struct RandomAssociation {
  std::size_t k;
  spflow::Index centers;
  spflow::Tensor<double> weights;
};

inline RandomAssociation random_association(std::size_t n, std::size_t count, std::size_t k, spflow::Rng& rng) {
  RandomAssociation a{k, {}, spflow::Tensor<double>(n, k)};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> pool(count);
    for (std::size_t l = 0; l < count; ++l) pool[l] = l;
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      std::swap(pool[j], pool[j + rng.index(count - j)]);
      a.centers.push_back(pool[j]);
      total += a.weights(i, j) = rng.uniform(0.01, 1);
    }
    for (std::size_t j = 0; j < k; ++j) a.weights(i, j) /= total;
  }
  return a;
}

}  // namespace detail

/// Runs every geometric and loss oracle on `instances` random cases each,
/// clouds of 1 to `max_points` points in [-1,1]^3.
inline std::vector<SweepResult> oracle_sweep(std::size_t instances = 200, std::size_t max_points = 256,
                                             std::uint64_t seed = 2024) {
  using namespace spflow;
  using detail::random_points;
  using detail::random_size;
  Rng rng(seed);
  std::vector<SweepResult> out{{"knn"},         {"fps"},         {"nearest_match"},    {"chamfer"},
                               {"smoothness"},  {"consistency"}, {"initial_flow"},     {"reconstruct_flow"},
                               {"update_centers"}};
  auto& r_knn = out[0];
  auto& r_fps = out[1];
  auto& r_nm = out[2];
  auto& r_ch = out[3];
  auto& r_sm = out[4];
  auto& r_co = out[5];
  auto& r_if = out[6];
  auto& r_rf = out[7];
  auto& r_uc = out[8];

  for (std::size_t inst = 0; inst < instances; ++inst) {
    const std::size_t n = random_size(rng, 2, max_points), m = random_size(rng, 1, max_points);
    const auto pt = random_points(n, rng), qt = random_points(m, rng);
    const PointCloud<double> p(pt), q(qt);
    const auto pr = rows_of(pt), qr = rows_of(qt);

    {  // knn against an independent reference set
      const std::size_t k = random_size(rng, 1, std::min<std::size_t>(m, 16));
      const auto got = knn(p, q, k);
      const auto want = oracle::knn(pr, qr, k);
      double err = detail::index_error(got.indices, want.indices);
      for (std::size_t i = 0; i < want.sq_dists.size(); ++i)
        err = std::max(err, std::abs(got.sq_dists[i] - want.sq_dists[i]));
      detail::record(r_knn, err);
    }
    {
      const std::size_t count = random_size(rng, 1, std::min<std::size_t>(n, 64));
      const std::size_t seed_index = rng.index(n);
      detail::record(r_fps, detail::index_error(farthest_point_sample(p, count, seed_index),
                                                 oracle::fps(pr, count, seed_index)));
    }
    detail::record(r_nm, detail::index_error(nearest_match(p, q), oracle::nearest_match(pr, qr)));

    Tensor<double> fp(n, 3), fq(m, 3);
    for (auto& v : fp.values()) v = rng.uniform(-0.3, 0.3);
    for (auto& v : fq.values()) v = rng.uniform(-0.3, 0.3);
    {
      ad::Tape<double> tape;
      auto warped = ad::add(tape.constant(pt), tape.constant(fp));
      const auto got = chamfer_loss(warped, q).value().item();
      detail::record(r_ch, std::abs(got - oracle::chamfer(rows_of(warped.value()), qr)));
    }
    {
      ad::Tape<double> tape;
      const std::size_t k = random_size(rng, 1, std::min<std::size_t>(n - 1, 8));
      const auto got = smoothness_loss(p, tape.constant(fp), k).value().item();
      detail::record(r_sm, std::abs(got - oracle::smoothness(pr, rows_of(fp), k)));
    }
    {
      ad::Tape<double> tape;
      const auto got = consistency_loss(tape.constant(fp), tape.constant(fq), p, q).value().item();
      detail::record(r_co, std::abs(got - oracle::consistency(rows_of(fp), rows_of(fq), pr, qr)));
    }
    {
      Tensor<double> plan(n, m);
      for (auto& v : plan.values()) v = rng.uniform(0.001, 1);
      ad::Tape<double> tape;
      const auto got = initial_flow(tape.constant(plan), p, q).value();
      detail::record(r_if, oracle::max_abs_diff(oracle::initial_flow(rows_of(plan), pr, qr), got));
    }
    {
      const std::size_t count = random_size(rng, 1, std::min<std::size_t>(n, 32));
      const std::size_t k = random_size(rng, 1, std::min<std::size_t>(count, 4));
      const std::size_t d = 1 + rng.index(6);
      auto a = detail::random_association(n, count, k, rng);
      if (rng.uniform() < 0.5)  // starve one center so the retention rule is exercised
        for (auto& c : a.centers)
          if (c == 0 && count > k) c = count - 1;
      Tensor<double> feats(n, d), prev(count, 6 + d), center_flows(count, 3);
      for (auto* t : {&feats, &prev, &center_flows})
        for (auto& v : t->values()) v = rng.uniform(-1, 1);
      ad::Tape<double> tape;
      AssociationMap<double> assoc{k, a.centers, tape.constant(a.weights)};
      SuperpointSet<double> centers{tape.constant(Tensor<double>(count, 3)), tape.constant(center_flows),
                                    tape.constant(Tensor<double>(count, d))};
      const auto rec = reconstruct_flow(assoc, centers).value();
      detail::record(r_rf, oracle::max_abs_diff(oracle::reconstruct(rows_of(a.weights), a.centers,
                                                                    rows_of(center_flows)),
                                                rec));
      SuperpointSet<double> previous{ad::slice_cols(tape.constant(prev), 0, 3), ad::slice_cols(tape.constant(prev), 3, 6),
                                     ad::slice_cols(tape.constant(prev), 6, 6 + d)};
      const auto upd = update_centers(assoc, p, tape.constant(fp), tape.constant(feats), previous);
      const auto merged = ad::concat_cols(std::vector<ad::Var<double>>{upd.coords, upd.flows, upd.descriptors});
      detail::record(r_uc, oracle::max_abs_diff(oracle::update_centers(rows_of(a.weights), a.centers, pr, rows_of(fp),
                                                                       rows_of(feats), rows_of(prev)),
                                                merged.value()));
    }
  }
  return out;
}

}  // namespace oracle
