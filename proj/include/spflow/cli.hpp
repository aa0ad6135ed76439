// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "gradcheck_suite.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "training.hpp"

namespace spflow::cli {

enum ExitCode : int { kSuccess = 0, kUnexpected = 1, kUsage = 2, kData = 3, kNumeric = 4 };

namespace detail {

namespace fs = std::filesystem;

inline std::string scene_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", i);
  return buf;
}

/// Scene subdirectories of `root` holding source.bin and target.bin, sorted by name.
inline std::vector<fs::path> scene_dirs(const std::string& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("'" + root + "' is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root, ec))
    if (entry.is_directory() && fs::exists(entry.path() / "source.bin") && fs::exists(entry.path() / "target.bin"))
      dirs.push_back(entry.path());
  if (ec) throw DataError("cannot list '" + root + "': " + ec.message());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("'" + root + "' contains no scene directories");
  return dirs;
}

inline RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw DataError("cannot write '" + path + "'");
}

template <class Real>
int estimate(const RunConfig& cfg, const std::string& source, const std::string& target, const std::string& ckpt,
             const std::string& out, const std::string& trace_path, const std::string& export_path) {
  const auto p = io::load_cloud<Real>(source);
  const auto q = io::load_cloud<Real>(target);
  const auto expected = init_parameters<double>(cfg.pipeline, 0);
  const auto store = io::load_checkpoint(ckpt, expected).template cast<Real>();

  PipelineOptions opts;
  std::ofstream trace;
  if (!trace_path.empty()) {
    trace.open(trace_path, std::ios::binary);
    if (!trace) throw DataError("cannot write '" + trace_path + "'");
    opts.trace = [&trace](const nlohmann::json& record) { trace << record.dump() << '\n'; };
  }
  const auto est = estimate_flow(store, cfg.pipeline, p, q, opts);
  io::save_flow(out, est.flow);
  if (!export_path.empty()) io::export_superpoints(export_path, p, est.dominant_center);
  if (trace.is_open() && !trace.flush()) throw DataError("cannot write '" + trace_path + "'");
  return kSuccess;
}

}  // namespace detail

inline int run_gen(const std::string& config_path, const std::string& out_dir, std::size_t count) {
  const auto cfg = load_config(config_path);
  require(count >= 1, "gen: --count must be >= 1");
  std::error_code ec;
  detail::fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create '" + out_dir + "': " + ec.message());
  for (std::size_t i = 0; i < count; ++i) {
    auto scfg = cfg.synthetic;
    scfg.seed = cfg.synthetic.seed + i;
    const auto scene = generate_scene<double>(scfg);
    const auto dir = detail::fs::path(out_dir) / detail::scene_dir_name(i);
    detail::fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
    io::save_cloud((dir / "source.bin").string(), scene.source);
    io::save_cloud((dir / "target.bin").string(), scene.target);
    io::save_flow((dir / "gtflow.bin").string(), *scene.gt_flow);
    io::save_labels((dir / "labels.bin").string(), *scene.part_labels);
    const nlohmann::json meta{{"seed", scfg.seed},
                              {"parts", scfg.parts},
                              {"points", scene.source.size()},
                              {"noise_sigma", scfg.noise_sigma}};
    detail::write_text((dir / "meta.json").string(), meta.dump(2) + "\n");
  }
  std::cout << "wrote " << count << " scene(s) to " << out_dir << "\n";
  return kSuccess;
}

inline int run_train(const std::string& data_dir, const std::string& config_path, const std::string& out,
                     std::optional<std::size_t> epochs, std::optional<std::uint64_t> seed) {
  auto cfg = load_config(config_path);
  if (epochs) cfg.train.epochs = *epochs;
  if (seed) cfg.train.seed = *seed;
  cfg.validate();
  std::vector<ScenePair<double>> scenes;
  for (const auto& dir : detail::scene_dirs(data_dir))
    scenes.push_back({io::load_cloud<double>((dir / "source.bin").string()),
                      io::load_cloud<double>((dir / "target.bin").string()), std::nullopt, std::nullopt});
  auto store = init_parameters<double>(cfg.pipeline, cfg.train.seed);
  train(store, scenes, cfg.pipeline, cfg.optim, cfg.train, [](const EpochStats& s) {
    std::cout << "epoch " << s.epoch + 1 << " lr " << s.lr << " loss " << s.mean_loss << std::endl;
    return false;
  });
  io::save_checkpoint(store, out);
  return kSuccess;
}

inline int run_estimate(const std::string& source, const std::string& target, const std::string& ckpt,
                        const std::string& config_path, std::optional<std::size_t> iters,
                        std::optional<std::size_t> superpoints, std::optional<std::size_t> knn, const std::string& out,
                        const std::string& trace_path, const std::string& export_path, const std::string& precision) {
  auto cfg = detail::config_or_default(config_path);
  if (iters) cfg.pipeline.iterations = *iters;
  if (superpoints) cfg.pipeline.superpoints = *superpoints;
  if (knn) cfg.pipeline.knn = *knn;
  cfg.validate();
  if (precision == "float32")
    return detail::estimate<float>(cfg, source, target, ckpt, out, trace_path, export_path);
  return detail::estimate<double>(cfg, source, target, ckpt, out, trace_path, export_path);
}

inline int run_eval(const std::string& pred, const std::string& gt, const std::string& json_path) {
  const auto flow = io::load_flow<double>(pred);
  const auto truth = io::load_flow<double>(gt);
  if (flow.rows() != truth.rows())
    throw DataError("eval: '" + pred + "' has " + std::to_string(flow.rows()) + " points but '" + gt + "' has " +
                    std::to_string(truth.rows()));
  const auto report = evaluate(flow, truth);
  const auto j = to_json(report);
  std::cout << j.dump() << "\n";
  if (!json_path.empty()) detail::write_text(json_path, j.dump(2) + "\n");
  return kSuccess;
}

inline int run_gradcheck(const std::string& module) {
  bool ok = true;
  for (const auto& c : gradcheck_cases(module)) {
    const auto rep = c.run();
    const bool passed = rep.passed(c.tolerance);
    ok = ok && passed;
    std::printf("%-4s %-22s %-34s checked=%zu refined=%zu one_sided=%zu skipped=%zu max_rel=%.3e tol=%.0e%s%s\n",
                passed ? "ok" : "FAIL", c.module.c_str(), c.name.c_str(), rep.checked, rep.refined, rep.one_sided,
                rep.skipped, rep.max_rel_error, c.tolerance, rep.worst.empty() ? "" : " worst=", rep.worst.c_str());
    std::fflush(stdout);
  }
  return ok ? kSuccess : kNumeric;
}

/// Parses the command line and dispatches; library errors map to exit codes.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Superpoint-guided self-supervised scene flow estimation"};
  app.require_subcommand(1);

  std::string config, out, data, source, target, ckpt, trace, export_path, pred, gt, json, module = "all";
  std::string precision = "float64";
  std::size_t count = 1;
  std::optional<std::size_t> epochs, iters, superpoints, knn;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen", "Write synthetic scene pairs");
  gen->add_option("--config", config, "Configuration file")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--count", count, "Number of scenes");

  auto* est = app.add_subcommand("estimate", "Estimate scene flow with a trained checkpoint");
  est->add_option("--source", source, "Source cloud (.bin or .ply)")->required();
  est->add_option("--target", target, "Target cloud (.bin or .ply)")->required();
  est->add_option("--ckpt", ckpt, "Checkpoint")->required();
  est->add_option("--config", config, "Configuration file");
  est->add_option("--iters", iters, "Refinement iterations");
  est->add_option("--superpoints", superpoints, "Number of superpoints");
  est->add_option("--knn", knn, "Candidate superpoints per point");
  est->add_option("--out", out, "Output flow file")->required();
  est->add_option("--trace", trace, "Per-iteration JSON lines");
  est->add_option("--export-superpoints", export_path, "Colored PLY of superpoint membership");
  est->add_option("--precision", precision, "Arithmetic precision")->check(CLI::IsMember({"float64", "float32"}));

  auto* tr = app.add_subcommand("train", "Self-supervised training on a scene directory");
  tr->add_option("--data", data, "Directory of scenes written by gen")->required();
  tr->add_option("--config", config, "Configuration file")->required();
  tr->add_option("--out", out, "Output checkpoint")->required();
  tr->add_option("--epochs", epochs, "Override train.epochs");
  tr->add_option("--seed", seed, "Override train.seed");

  auto* ev = app.add_subcommand("eval", "Compare a predicted flow with ground truth");
  ev->add_option("--pred", pred, "Predicted flow")->required();
  ev->add_option("--gt", gt, "Ground-truth flow")->required();
  ev->add_option("--json", json, "Write the metrics as JSON");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc->add_option("--module", module, "Module name or 'all'");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    if (gen->parsed()) return run_gen(config, out, count);
    if (est->parsed())
      return run_estimate(source, target, ckpt, config, iters, superpoints, knn, out, trace, export_path, precision);
    if (tr->parsed()) return run_train(data, config, out, epochs, seed);
    if (ev->parsed()) return run_eval(pred, gt, json);
    if (gc->parsed()) return run_gradcheck(module);
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUsage;
}

}  // namespace spflow::cli
