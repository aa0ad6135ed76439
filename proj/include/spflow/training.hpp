// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "metrics.hpp"
#include "optim.hpp"
#include "refinement.hpp"
#include "synthetic.hpp"

namespace spflow {

/// Worker threads: SPFLOW_THREADS when set to a positive integer, otherwise
/// the machine's hardware concurrency.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("SPFLOW_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs `job(i)` for i in [0, count) on up to `threads` workers. Each index
/// is processed exactly once; the first exception is rethrown after joining.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;   // parameter initialisation and shuffling
  std::size_t threads = 0;  // 0: thread_count()
  bool check_invariants = false;

  void validate() const {
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    require(batch_size >= 1, "TrainConfig: batch size must be >= 1");
  }
};

struct SceneGradient {
  Gradients<double> grads;
  LossReport loss;
};

/// Loss and parameter gradients of one scene on a private tape.
inline SceneGradient scene_gradient(const ParameterStore<double>& store, const PipelineConfig& cfg,
                                    const ScenePair<double>& scene, bool check_invariants = false) {
  ad::Tape<double> tape;
  ParamBank<double> bank(tape, store);
  PipelineOptions opts;
  opts.check_invariants = check_invariants;
  auto result = run_pipeline(scene.source, scene.target, cfg, bank, opts);
  SceneGradient out;
  auto loss = pipeline_loss(result, scene.source, scene.target, cfg.loss, &out.loss);
  tape.backward(loss);
  out.grads = store.make_gradients();
  tape.accumulate_parameter_gradients(out.grads);
  return out;
}

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
};

/// Called after every epoch; returning true stops training early.
using EpochCallback = std::function<bool(const EpochStats&)>;

/// Self-supervised ADAM training. Scenes are shuffled per epoch from the
/// seed; each minibatch gradient is the mean of per-scene gradients, summed
/// in scene order so the result does not depend on the thread count.
inline std::vector<EpochStats> train(ParameterStore<double>& store, const std::vector<ScenePair<double>>& scenes,
                                     const PipelineConfig& cfg, OptimConfig optim, const TrainConfig& tcfg,
                                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  tcfg.validate();
  require(!scenes.empty(), "train: no scenes");
  optim.total_epochs = std::max(optim.total_epochs, static_cast<int>(tcfg.epochs));
  optim.validate();
  const std::size_t threads = tcfg.threads ? tcfg.threads : thread_count();
  std::vector<std::size_t> order(scenes.size());
  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(tcfg.seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    const double lr = lr_at_epoch(optim, static_cast<int>(epoch));
    double loss_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += tcfg.batch_size) {
      const std::size_t count = std::min(tcfg.batch_size, order.size() - begin);
      std::vector<SceneGradient> parts(count);
      parallel_for(count, threads, [&](std::size_t j) {
        parts[j] = scene_gradient(store, cfg, scenes[order[begin + j]], tcfg.check_invariants);
      });
      store.zero_grad();
      for (const auto& part : parts) {
        store.accumulate(part.grads, 1.0 / static_cast<double>(count));
        loss_sum += part.loss.total;
      }
      adam_step(store, lr, optim);
    }
    EpochStats stats{epoch, lr, loss_sum / static_cast<double>(scenes.size())};
    history.push_back(stats);
    if (on_epoch && on_epoch(stats)) break;
  }
  return history;
}

/// Flows and superpoints of one forward pass, detached from the tape.
template <class Real = double>
struct Estimate {
  Tensor<Real> flow;          // final F^{p,T}
  Tensor<Real> initial_flow;  // F^{p,0}
  std::vector<std::size_t> dominant_center;
};

template <class Real>
Estimate<Real> estimate_flow(const ParameterStore<Real>& store, const PipelineConfig& cfg, const PointCloud<Real>& p,
                             const PointCloud<Real>& q, const PipelineOptions& opts = {}) {
  ad::Tape<Real> tape;
  tape.set_grad_enabled(false);
  ParamBank<Real> bank(tape, store);
  auto result = run_pipeline(p, q, cfg, bank, opts);
  return {result.final_p().value(), result.fp0.value(), dominant_centers(result.iterations.back().p.assoc)};
}

/// Mean of per-scene metrics for the final and the initial flow.
struct DatasetMetrics {
  MetricsReport final_flow;
  MetricsReport initial_flow;
};

inline DatasetMetrics evaluate_dataset(const ParameterStore<double>& store, const PipelineConfig& cfg,
                                       const std::vector<ScenePair<double>>& scenes, std::size_t threads = 0) {
  require(!scenes.empty(), "evaluate_dataset: no scenes");
  std::vector<DatasetMetrics> per(scenes.size());
  parallel_for(scenes.size(), threads ? threads : thread_count(), [&](std::size_t i) {
    require(scenes[i].gt_flow.has_value(), "evaluate_dataset: scene without ground truth");
    auto est = estimate_flow(store, cfg, scenes[i].source, scenes[i].target);
    per[i] = {evaluate(est.flow, *scenes[i].gt_flow), evaluate(est.initial_flow, *scenes[i].gt_flow)};
  });
  DatasetMetrics mean;
  auto add = [](MetricsReport& acc, const MetricsReport& m) {
    acc.epe += m.epe, acc.as_pct += m.as_pct, acc.ar_pct += m.ar_pct, acc.out_pct += m.out_pct;
  };
  for (const auto& m : per) add(mean.final_flow, m.final_flow), add(mean.initial_flow, m.initial_flow);
  const double n = static_cast<double>(scenes.size());
  for (auto* m : {&mean.final_flow, &mean.initial_flow})
    m->epe /= n, m->as_pct /= n, m->ar_pct /= n, m->out_pct /= n;
  return mean;
}

}  // namespace spflow
