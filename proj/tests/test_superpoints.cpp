// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include <spflow/spflow.hpp>

#include "oracles.hpp"

using namespace spflow;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

PointCloud<double> random_cloud(std::size_t n, Rng& rng) { return PointCloud<double>(random_matrix(n, 3, rng)); }

ParameterStore<double> assoc_store(std::size_t d, Rng& rng, bool zero = false) {
  ParameterStore<double> store;
  AssociationConfig{}.register_parameters(store, d, rng);
  if (zero)
    for (auto& e : store.entries()) e.value.fill(0);
  return store;
}

}  // namespace

TEST(InitSuperpoints, WholeCloudInFpsOrder) {
  Rng rng(1);
  const auto c = random_cloud(6, rng);
  ad::Tape<double> tape;
  const auto flow = random_matrix(6, 3, rng), feats = random_matrix(6, 4, rng);
  const auto sp = init_superpoints(c, tape.constant(flow), tape.constant(feats), 6);
  const auto order = farthest_point_sample(c, 6, 0);
  for (std::size_t l = 0; l < 6; ++l)
    for (std::size_t a = 0; a < 3; ++a) {
      EXPECT_EQ(sp.coords.value()(l, a), c.coords()(order[l], a));
      EXPECT_EQ(sp.flows.value()(l, a), flow(order[l], a));
    }
}

TEST(InitSuperpoints, ZeroFlowGivesZeroCenterFlows) {
  Rng rng(2);
  const auto c = random_cloud(10, rng);
  ad::Tape<double> tape;
  const auto sp = init_superpoints(c, tape.constant(Tensor<double>(10, 3)), tape.constant(random_matrix(10, 2, rng)), 4);
  for (auto v : sp.flows.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(InitSuperpoints, EightPointsThreeCentersMatchExhaustiveFps) {
  Rng rng(3);
  const auto c = random_cloud(8, rng);
  const auto flow = random_matrix(8, 3, rng), feats = random_matrix(8, 5, rng);
  ad::Tape<double> tape;
  const auto sp = init_superpoints(c, tape.constant(flow), tape.constant(feats), 3);
  const auto idx = oracle::fps(oracle::rows_of(c.coords()), 3, 0);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(sp.descriptors.value()(l, j), feats(idx[l], j));
}

TEST(InitSuperpoints, TooManyCentersIsRejected) {
  Rng rng(4);
  const auto c = random_cloud(3, rng);
  ad::Tape<double> tape;
  EXPECT_THROW(init_superpoints(c, tape.constant(Tensor<double>(3, 3)), tape.constant(Tensor<double>(3, 2)), 4),
               ContractError);
}

TEST(Warp, IdenticalCloudsMatchTheirTwins) {
  Rng rng(5);
  const auto p = random_cloud(12, rng);
  const auto feats = random_matrix(12, 4, rng);
  ad::Tape<double> tape;
  const auto sp = init_superpoints(p, tape.constant(Tensor<double>(12, 3)), tape.constant(feats), 3);
  const auto w = warp_correspondences(p, tape.constant(Tensor<double>(12, 3)), sp, p, tape.constant(feats));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(w.point_match[i], i);
  EXPECT_EQ(w.point_descriptors.value(), feats);
}

TEST(Warp, ExactRigidTranslationHitsCorrespondents) {
  Rng rng(6);
  const auto p = random_cloud(15, rng);
  Tensor<double> t(15, 3);
  for (std::size_t i = 0; i < 15; ++i) t(i, 0) = 0.5, t(i, 1) = -0.25, t(i, 2) = 0.125;
  const auto q = p.warped(t);
  ad::Tape<double> tape;
  const auto sp = init_superpoints(p, tape.constant(t), tape.constant(random_matrix(15, 3, rng)), 4);
  const auto w = warp_correspondences(p, tape.constant(t), sp, q, tape.constant(random_matrix(15, 3, rng)));
  for (std::size_t i = 0; i < 15; ++i) {
    EXPECT_EQ(w.point_match[i], i);
    EXPECT_EQ(squared_distance(w.points.value().data() + 3 * i, q.coords().data() + 3 * i), 0.0);
  }
}

TEST(Warp, MatchesBruteForceWarpAndArgmin) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_cloud(10, rng), q = random_cloud(9, rng);
    const auto flow = random_matrix(10, 3, rng, -0.3, 0.3), qf = random_matrix(9, 4, rng);
    ad::Tape<double> tape;
    const auto sp = init_superpoints(p, tape.constant(flow), tape.constant(random_matrix(10, 4, rng)), 3);
    const auto w = warp_correspondences(p, tape.constant(flow), sp, q, tape.constant(qf));
    auto warped = oracle::rows_of(p.coords());
    for (std::size_t i = 0; i < 10; ++i)
      for (int c = 0; c < 3; ++c) warped[i][c] += flow(i, c);
    const auto want = oracle::nearest_match(warped, oracle::rows_of(q.coords()));
    EXPECT_EQ(std::vector<std::size_t>(w.point_match.begin(), w.point_match.end()), want);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(w.point_descriptors.value()(i, j), qf(want[i], j));
    auto centers = oracle::rows_of(ad::add(sp.coords, sp.flows).value());
    EXPECT_EQ(std::vector<std::size_t>(w.center_match.begin(), w.center_match.end()),
              oracle::nearest_match(centers, oracle::rows_of(q.coords())));
  }
}

namespace {

struct AssocFixture {
  PointCloud<double> p, q;
  Tensor<double> flow, x, y;
  AssocFixture(std::size_t n, std::size_t m, std::size_t d, Rng& rng)
      : p(random_cloud(n, rng)),
        q(random_cloud(m, rng)),
        flow(random_matrix(n, 3, rng, -0.2, 0.2)),
        x(random_matrix(n, d, rng)),
        y(random_matrix(m, d, rng)) {}

  AssociationMap<double> run(ad::Tape<double>& tape, ParamBank<double>& bank, std::size_t count, std::size_t k,
                             SuperpointSet<double>* centers_out = nullptr,
                             WarpedCorrespondence<double>* warped_out = nullptr) {
    auto f = tape.constant(flow), xv = tape.constant(x);
    auto sp = init_superpoints(p, f, xv, count);
    auto w = warp_correspondences(p, f, sp, q, tape.constant(y));
    if (centers_out) *centers_out = sp;
    if (warped_out) *warped_out = w;
    return association(p, xv, sp, w, k, AssociationConfig{}, bank);
  }
};

}  // namespace

TEST(Association, SingleCenterGivesUnitWeights) {
  Rng rng(8);
  AssocFixture fx(10, 8, 4, rng);
  const auto store = assoc_store(4, rng);
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  for (auto v : fx.run(tape, bank, 3, 1).weights.value().values()) EXPECT_EQ(v, 1.0);
}

TEST(Association, ZeroMlpGivesUniformWeights) {
  Rng rng(9);
  AssocFixture fx(10, 8, 4, rng);
  const auto store = assoc_store(4, rng, true);
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  for (auto v : fx.run(tape, bank, 5, 3).weights.value().values()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
}

TEST(Association, TooManyAttendedCentersIsRejected) {
  Rng rng(10);
  AssocFixture fx(6, 6, 2, rng);
  const auto store = assoc_store(2, rng);
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  EXPECT_THROW(fx.run(tape, bank, 2, 3), ContractError);
}

TEST(Association, MatchesHandRolledLogitsAndSoftmax) {
  Rng rng(11);
  const std::size_t d = 3;
  AssocFixture fx(4, 5, d, rng);
  const auto store = assoc_store(d, rng);
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  SuperpointSet<double> sp;
  WarpedCorrespondence<double> w;
  const auto a = fx.run(tape, bank, 2, 2, &sp, &w);
  const auto sc = oracle::rows_of(sp.coords.value()), sd = oracle::rows_of(sp.descriptors.value());
  const auto wsc = oracle::rows_of(w.centers.value()), wsd = oracle::rows_of(w.center_descriptors.value());
  const auto wp = oracle::rows_of(w.points.value()), wx = oracle::rows_of(w.point_descriptors.value());
  auto mlp = [&](const std::vector<double>& in, const std::string& name) {
    auto h = oracle::dense(in, store.value(name + ".0.weight"), store.value(name + ".0.bias"));
    for (auto& v : h) v = oracle::leaky(v, 0.1);
    const auto o = oracle::dense(h, store.value(name + ".1.weight"), store.value(name + ".1.bias"));
    double s = 0;
    for (double v : o) s += v;
    return s;
  };
  for (std::size_t i = 0; i < 4; ++i) {
    const auto ranked = oracle::ranked(oracle::rows_of(fx.p.coords())[i], sc, 2);
    std::vector<double> logits;
    for (std::size_t k = 0; k < 2; ++k) {
      const auto l = ranked[k].second;
      EXPECT_EQ(a.centers[i * 2 + k], l);
      std::vector<double> u, g;
      for (std::size_t c = 0; c < d; ++c) u.push_back(fx.x(i, c) - sd[l][c]);
      for (std::size_t c = 0; c < d; ++c) u.push_back(wx[i][c] - wsd[l][c]);
      for (std::size_t c = 0; c < 3; ++c) g.push_back(fx.p.coords()(i, c) - sc[l][c]);
      for (std::size_t c = 0; c < 3; ++c) g.push_back(wp[i][c] - wsc[l][c]);
      logits.push_back(mlp(u, "assoc_u") + mlp(g, "assoc_g"));
    }
    const double mx = std::max(logits[0], logits[1]);
    const double z = std::exp(logits[0] - mx) + std::exp(logits[1] - mx);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(a.weights.value()(i, k), std::exp(logits[k] - mx) / z, 1e-13);
  }
}

TEST(Association, RowsAreProbabilityVectors) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    AssocFixture fx(40, 30, 6, rng);
    const auto store = assoc_store(6, rng);
    ad::Tape<double> tape;
    ParamBank<double> bank(tape, store);
    const auto w = fx.run(tape, bank, 8, 3).weights.value();
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0;
      for (auto v : w.row(i)) {
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

namespace {

SuperpointSet<double> previous_centers(ad::Tape<double>& tape, std::size_t count, std::size_t d, Rng& rng) {
  return {tape.constant(random_matrix(count, 3, rng)), tape.constant(random_matrix(count, 3, rng)),
          tape.constant(random_matrix(count, d, rng))};
}

}  // namespace

TEST(UpdateCenters, HardAssignmentAveragesItsPoints) {
  const PointCloud<double> p(Tensor<double>::from_rows({{0, 0, 0}, {2, 4, 6}, {9, 9, 9}}));
  ad::Tape<double> tape;
  Rng rng(13);
  const auto flow = Tensor<double>::from_rows({{1, 0, 0}, {3, 2, 0}, {5, 5, 5}});
  AssociationMap<double> a{1, {0, 0, 1}, tape.constant(Tensor<double>(3, 1, 1.0))};
  const auto out = update_centers(a, p, tape.constant(flow), tape.constant(Tensor<double>(3, 2)),
                                  previous_centers(tape, 2, 2, rng));
  EXPECT_EQ(out.coords.value()(0, 0), 1.0);
  EXPECT_EQ(out.coords.value()(0, 1), 2.0);
  EXPECT_EQ(out.coords.value()(0, 2), 3.0);
  EXPECT_EQ(out.flows.value()(0, 0), 2.0);
  EXPECT_EQ(out.flows.value()(0, 1), 1.0);
}

TEST(UpdateCenters, UnattendedCenterIsRetained) {
  Rng rng(14);
  const auto p = random_cloud(4, rng);
  ad::Tape<double> tape;
  const auto prev = previous_centers(tape, 3, 2, rng);
  AssociationMap<double> a{1, {0, 0, 1, 1}, tape.constant(Tensor<double>(4, 1, 1.0))};
  const auto out = update_centers(a, p, tape.constant(random_matrix(4, 3, rng)), tape.constant(random_matrix(4, 2, rng)), prev);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out.coords.value()(2, c), prev.coords.value()(2, c));
    EXPECT_EQ(out.flows.value()(2, c), prev.flows.value()(2, c));
  }
  for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out.descriptors.value()(2, c), prev.descriptors.value()(2, c));
}

TEST(UpdateCenters, MatchesWeightedMeanOracleAndStaysInBoundingBox) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6, count = 3, k = 2, d = 3;
    const auto p = random_cloud(n, rng);
    const auto flow = random_matrix(n, 3, rng), feats = random_matrix(n, d, rng);
    Index centers;
    Tensor<double> w(n, k);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t first = rng.index(count);
      centers.push_back(first);
      centers.push_back((first + 1 + rng.index(count - 1)) % count);
      const double a = rng.uniform(0.05, 0.95);
      w(i, 0) = a, w(i, 1) = 1 - a;
    }
    ad::Tape<double> tape;
    const auto prev = previous_centers(tape, count, d, rng);
    AssociationMap<double> assoc{k, centers, tape.constant(w)};
    const auto out = update_centers(assoc, p, tape.constant(flow), tape.constant(feats), prev);
    const auto merged = ad::concat_cols(std::vector<ad::Var<double>>{out.coords, out.flows, out.descriptors}).value();
    const auto prev_rows = oracle::rows_of(
        ad::concat_cols(std::vector<ad::Var<double>>{prev.coords, prev.flows, prev.descriptors}).value());
    const auto want = oracle::update_centers(oracle::rows_of(w), centers, oracle::rows_of(p.coords()),
                                             oracle::rows_of(flow), oracle::rows_of(feats), prev_rows);
    EXPECT_LT(oracle::max_abs_diff(want, merged), 1e-14);
    for (std::size_t l = 0; l < count; ++l) {
      bool attended = false;
      for (std::size_t c = 0; c < 3; ++c) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            if (centers[i * k + j] == l) {
              attended = true;
              lo = std::min(lo, p.coords()(i, c));
              hi = std::max(hi, p.coords()(i, c));
            }
        if (!attended) break;
        EXPECT_GE(out.coords.value()(l, c), lo - 1e-12);
        EXPECT_LE(out.coords.value()(l, c), hi + 1e-12);
      }
    }
  }
}

TEST(Generation, RigidPartsNeverShareAStrongSuperpoint) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SyntheticConfig scfg;
    scfg.points_per_part = 100;
    scfg.extent = 0.5;
    scfg.separation = 5 * 0.5 * std::sqrt(3.0);  // five part diameters
    scfg.seed = seed;
    const auto scene = generate_scene<double>(scfg);
    const auto& labels = *scene.part_labels;
    PipelineConfig cfg;
    auto store = init_parameters<double>(cfg, seed);
    ad::Tape<double> tape;
    ParamBank<double> bank(tape, store);
    const auto frame_p = LocalFrame<double>(scene.source, cfg.encoder.k_conv);
    const auto frame_q = LocalFrame<double>(scene.target, cfg.encoder.k_conv);
    auto x = encode(frame_p, cfg.encoder, bank), y = encode(frame_q, cfg.encoder, bank);
    auto flow = tape.constant(*scene.gt_flow);
    for (std::size_t count : {10, 30}) {
      auto sp = init_superpoints(scene.source, flow, x, count);
      auto w = warp_correspondences(scene.source, flow, sp, scene.target, y);
      auto a = association(scene.source, x, sp, w, 2, cfg.assoc, bank);
      update_centers(a, scene.source, flow, x, sp);
      std::vector<std::set<std::int32_t>> parts(count);
      for (std::size_t i = 0; i < scene.source.size(); ++i)
        for (std::size_t j = 0; j < 2; ++j)
          if (a.weights.value()(i, j) > 0.5) parts[a.centers[i * 2 + j]].insert(labels[i]);
      for (const auto& s : parts) EXPECT_LE(s.size(), 1u) << "seed " << seed << " L " << count;
    }
  }
}

TEST(GradCheck, SuperpointCasesPass) {
  for (const auto& c : gradcheck_cases("superpoint-generation")) {
    const auto rep = c.run();
    EXPECT_TRUE(rep.passed(c.tolerance)) << c.name << " max_rel=" << rep.max_rel_error << " at " << rep.worst;
  }
}
