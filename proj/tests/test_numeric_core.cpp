// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include <spflow/spflow.hpp>

#include "oracles.hpp"

using namespace spflow;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

ParameterStore<double> single(const std::string& name, Tensor<double> value) {
  ParameterStore<double> store;
  store.add(name, std::move(value));
  return store;
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  auto store = single("p", Tensor<double>::from_rows({{0.3, -1.0, 2.5}}));
  ad::Tape<double> tape;
  auto p = tape.parameter(store, "p");
  ad::backward(ad::sum(p), store);
  for (auto g : store.grad("p").values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ZeroScaleGivesZeros) {
  auto store = single("p", Tensor<double>::from_rows({{0.3, -1.0, 2.5}}));
  ad::Tape<double> tape;
  ad::backward(ad::sum(ad::scale(tape.parameter(store, "p"), 0.0)), store);
  for (auto g : store.grad("p").values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, UntouchedParameterGetsZeroGradient) {
  ParameterStore<double> store;
  store.add("used", Tensor<double>(2, 2, 1.0));
  store.add("unused", Tensor<double>(1, 3, 1.0));
  ad::Tape<double> tape;
  ad::backward(ad::sum(ad::mul(tape.parameter(store, "used"), tape.parameter(store, "used"))), store);
  for (auto g : store.grad("used").values()) EXPECT_EQ(g, 2.0);
  for (auto g : store.grad("unused").values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  auto store = single("p", Tensor<double>(1, 3, 1.0));
  ad::Tape<double> tape;
  EXPECT_THROW(ad::backward(tape.parameter(store, "p"), store), ContractError);
}

TEST(Backward, NonFiniteValueIsReported) {
  ad::Tape<double> tape;
  auto x = tape.variable(Tensor<double>::from_rows({{0.0}}));
  EXPECT_THROW(ad::check_finite(ad::reciprocal(x), "probe"), NumericError);
  try {
    ad::check_finite(ad::reciprocal(x), "probe");
  } catch (const NumericError& e) {
    EXPECT_EQ(e.stage(), "probe");
  }
}

TEST(Backward, GradientSumsOverRepeatedUse) {
  auto store = single("w", Tensor<double>::from_rows({{2.0}}));
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  auto loss = ad::add(ad::mul(bank("w"), bank("w")), ad::scale(bank("w"), 3.0));
  ad::backward(loss, store);
  EXPECT_DOUBLE_EQ(store.grad("w").item(), 2 * 2.0 + 3.0);
}

TEST(Kernels, MatmulMatchesNaiveOnRandomShapes) {
  Rng rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + rng.index(40), k = 1 + rng.index(40), m = 1 + rng.index(40);
    const auto a = random_matrix(n, k, rng), b = random_matrix(k, m, rng);
    const auto got = matmul(a, b), want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Kernels, MatmulGradientsMatchTransposedProducts) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.index(30), k = 1 + rng.index(30), m = 1 + rng.index(30);
    const auto a = random_matrix(n, k, rng), b = random_matrix(k, m, rng), r = random_matrix(n, m, rng);
    ad::Tape<double> tape;
    auto va = tape.variable(a), vb = tape.variable(b);
    tape.backward(ad::sum(ad::mul(ad::matmul(va, vb), tape.constant(r))));
    const auto ga = naive_matmul(r, transpose(b)), gb = naive_matmul(transpose(a), r);
    const auto da = tape.grad(va), db = tape.grad(vb);
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(da[i], ga[i], 1e-12);
    for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_NEAR(db[i], gb[i], 1e-12);
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(5);
  ad::Tape<double> tape;
  auto s = ad::softmax_rows(tape.constant(random_matrix(20, 7, rng))).value();
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double total = 0;
    for (auto v : s.row(i)) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Ops, NeighborhoodMaxMatchesUnfusedComposition) {
  Rng rng(6);
  const std::size_t n = 9, k = 4, d = 5, out = 6;
  const auto feats = random_matrix(n, d, rng), w = random_matrix(d, out, rng), wr = random_matrix(3, out, rng);
  const auto bias = random_matrix(1, out, rng), rel = random_matrix(n * k, 3, rng);
  ad::Index idx(n * k);
  for (auto& i : idx) i = rng.index(n);
  ad::Tape<double> tape;
  auto f = tape.constant(feats);
  std::vector<ad::GatherTerm<double>> terms{{ad::matmul(f, tape.constant(w)), idx}};
  auto fused = ad::neighborhood_max(terms, tape.constant(rel), tape.constant(wr), tape.constant(bias), k, true, 0.1);
  auto h = ad::add(ad::gather_rows(ad::matmul(f, tape.constant(w)), idx), ad::matmul(tape.constant(rel), tape.constant(wr)));
  auto plain = ad::group_max(ad::leaky_relu(ad::add_row(h, tape.constant(bias)), 0.1), k);
  for (std::size_t i = 0; i < fused.value().size(); ++i) EXPECT_NEAR(fused.value()[i], plain.value()[i], 1e-12);
}

TEST(Ops, ForwardAndGradientAreBitDeterministic) {
  auto run = [] {
    Rng rng(8);
    const auto a = random_matrix(12, 5, rng), b = random_matrix(5, 4, rng);
    ad::Tape<double> tape;
    auto va = tape.variable(a);
    auto y = ad::sum(ad::tanh(ad::matmul(va, tape.constant(b))));
    tape.backward(y);
    return std::make_pair(y.value().item(), tape.grad(va));
  };
  const auto r1 = run(), r2 = run();
  EXPECT_EQ(r1.first, r2.first);
  EXPECT_EQ(r1.second, r2.second);
}

TEST(GradCheck, NumericCoreOpsPass) {
  for (const auto& c : gradcheck_cases("numeric-core")) {
    const auto rep = c.run();
    EXPECT_TRUE(rep.passed(c.tolerance)) << c.name << " max_rel=" << rep.max_rel_error << " at " << rep.worst;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  auto bad = [](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& v) {
    const auto x = v[0];
    const std::size_t ix = x.id();
    return tape.push("wrong_square", Tensor<double>(1, 1, x.value().item() * x.value().item()), {ix},
                     [ix](ad::Tape<double>& t, std::size_t self) { t.adjoint(ix)[0] += t.adjoint(self)[0]; });
  };
  const auto rep = check_input_gradients("bad", bad, {Tensor<double>::from_rows({{0.7}})});
  EXPECT_FALSE(rep.passed(1e-3));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto store = single("p", Tensor<double>::from_rows({{0.5, -0.25}}));
  const auto before = store.value("p");
  adam_step(store, 1e-3);
  EXPECT_EQ(store.value("p"), before);
  EXPECT_EQ(store.step(), 1u);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLearningRate) {
  auto store = single("p", Tensor<double>::from_rows({{1.0}}));
  store.grad("p")[0] = 1.0;
  adam_step(store, 1e-3);
  EXPECT_NEAR(store.value("p").item(), 1.0 - 1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(store.grad("p").item(), 0.0);
}

TEST(Adam, IdenticalParametersGetIdenticalUpdates) {
  ParameterStore<double> store;
  store.add("a", Tensor<double>::from_rows({{0.1, 0.2}}));
  store.add("b", Tensor<double>::from_rows({{0.1, 0.2}}));
  for (int s = 0; s < 5; ++s) {
    for (const char* n : {"a", "b"}) store.grad(n) = Tensor<double>::from_rows({{0.3 * s - 0.4, 1.5}});
    adam_step(store, 1e-2);
  }
  EXPECT_EQ(store.value("a"), store.value("b"));
}

TEST(Adam, MatchesHandRolledRecurrence) {
  auto store = single("p", Tensor<double>::from_rows({{0.0}}));
  double x = 0, m = 0, v = 0;
  const double grads[] = {0.5, -1.0, 2.0, 0.25};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    store.grad("p")[0] = g;
    adam_step(store, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(store.value("p").item(), x, 1e-15);
  }
}

TEST(Adam, RejectsNonPositiveLearningRate) {
  auto store = single("p", Tensor<double>(1, 1));
  EXPECT_THROW(adam_step(store, 0.0), ContractError);
  EXPECT_THROW(adam_step(store, -1e-3), ContractError);
}

TEST(Schedule, DocumentedValues) {
  const OptimConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 0), 0.001);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 39), 0.001);
  EXPECT_NEAR(lr_at_epoch(cfg, 40), 0.0007, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 55), 0.00049, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 99), 3.43e-4, 1e-15);
}

TEST(Schedule, RejectsOutOfRangeEpochsAndBadConfigs) {
  OptimConfig cfg;
  EXPECT_THROW(lr_at_epoch(cfg, -1), ContractError);
  EXPECT_THROW(lr_at_epoch(cfg, 100), ContractError);
  cfg.decay_epochs = {40, 40};
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg.decay_epochs = {40};
  cfg.decay_factor = 0;
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(Schedule, IsNonIncreasing) {
  const OptimConfig cfg;
  for (int e = 1; e < cfg.total_epochs; ++e) EXPECT_LE(lr_at_epoch(cfg, e), lr_at_epoch(cfg, e - 1));
}

TEST(ParameterStoreTest, NamesAreUniqueAndSlotsMatchShapes) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>(3, 2));
  EXPECT_THROW(store.add("w", Tensor<double>(1, 1)), ContractError);
  const auto& e = store.entries().front();
  EXPECT_TRUE(e.grad.same_shape(e.value));
  EXPECT_TRUE(e.first_moment.same_shape(e.value));
  EXPECT_TRUE(e.second_moment.same_shape(e.value));
}
