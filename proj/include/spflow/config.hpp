// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "optim.hpp"
#include "refinement.hpp"
#include "synthetic.hpp"
#include "training.hpp"

namespace spflow {

/// Every tunable of a run, as read from a flat key=value file.
struct RunConfig {
  PipelineConfig pipeline;
  OptimConfig optim;
  SyntheticConfig synthetic;
  TrainConfig train;

  void validate() const {
    pipeline.validate();
    optim.validate();
    synthetic.validate();
    train.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ContractError("config: key '" + key + "' has invalid value '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ContractError("config: key '" + key + "' expects true/false, got '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class Field>
ConfigKey number_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_number<T>(k, v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(field(c));
            else
              return std::to_string(field(c));
          }};
}

template <class Field>
ConfigKey bool_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
          [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <class T, class Field>
ConfigKey list_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_list<T>(k, v); },
          [field](const RunConfig& c) { return join(field(c)); }};
}

template <class Field>
ConfigKey triple_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) {
            auto list = parse_list<double>(k, v);
            if (list.size() != 3) throw ContractError("config: key '" + k + "' expects three comma-separated values");
            for (std::size_t a = 0; a < 3; ++a) field(c)[a] = list[a];
          },
          [field](const RunConfig& c) {
            const auto& t = field(c);
            return format_double(t[0]) + "," + format_double(t[1]) + "," + format_double(t[2]);
          }};
}

}  // namespace detail

/// The documented configuration keys, sorted by name.
inline const std::map<std::string, detail::ConfigKey>& config_keys() {
  using namespace detail;
  using S = std::size_t;
  static const std::map<std::string, ConfigKey> keys{
      {"pipeline.superpoints", number_key<S>([](auto& c) -> auto& { return c.pipeline.superpoints; })},
      {"pipeline.knn", number_key<S>([](auto& c) -> auto& { return c.pipeline.knn; })},
      {"pipeline.iterations", number_key<S>([](auto& c) -> auto& { return c.pipeline.iterations; })},
      {"pipeline.hidden_dim", number_key<S>([](auto& c) -> auto& { return c.pipeline.hidden_dim; })},
      {"pipeline.embed_k", number_key<S>([](auto& c) -> auto& { return c.pipeline.embed_k; })},
      {"pipeline.confidence_hidden", number_key<S>([](auto& c) -> auto& { return c.pipeline.confidence_hidden; })},
      {"pipeline.regressor_hidden", number_key<S>([](auto& c) -> auto& { return c.pipeline.regressor_hidden; })},
      {"pipeline.slope", number_key<double>([](auto& c) -> auto& { return c.pipeline.slope; })},
      {"pipeline.sinkhorn_epsilon",
       number_key<double>([](auto& c) -> auto& { return c.pipeline.sinkhorn_epsilon; })},
      {"pipeline.sinkhorn_iterations",
       number_key<S>([](auto& c) -> auto& { return c.pipeline.sinkhorn_iterations; })},
      {"encoder.widths", list_key<S>([](auto& c) -> auto& { return c.pipeline.encoder.widths; })},
      {"encoder.k_conv", number_key<S>([](auto& c) -> auto& { return c.pipeline.encoder.k_conv; })},
      {"encoder.slope", number_key<double>([](auto& c) -> auto& { return c.pipeline.encoder.slope; })},
      {"assoc.hidden", number_key<S>([](auto& c) -> auto& { return c.pipeline.assoc.hidden; })},
      {"assoc.slope", number_key<double>([](auto& c) -> auto& { return c.pipeline.assoc.slope; })},
      {"loss.alpha", number_key<double>([](auto& c) -> auto& { return c.pipeline.loss.alpha; })},
      {"loss.beta", number_key<double>([](auto& c) -> auto& { return c.pipeline.loss.beta; })},
      {"loss.smooth_k", number_key<S>([](auto& c) -> auto& { return c.pipeline.loss.smooth_k; })},
      {"loss.mean_normalized", bool_key([](auto& c) -> auto& { return c.pipeline.loss.mean_normalized; })},
      {"loss.symmetric", bool_key([](auto& c) -> auto& { return c.pipeline.loss.symmetric; })},
      {"optim.base_lr", number_key<double>([](auto& c) -> auto& { return c.optim.base_lr; })},
      {"optim.beta1", number_key<double>([](auto& c) -> auto& { return c.optim.beta1; })},
      {"optim.beta2", number_key<double>([](auto& c) -> auto& { return c.optim.beta2; })},
      {"optim.epsilon", number_key<double>([](auto& c) -> auto& { return c.optim.epsilon; })},
      {"optim.decay_epochs", list_key<int>([](auto& c) -> auto& { return c.optim.decay_epochs; })},
      {"optim.decay_factor", number_key<double>([](auto& c) -> auto& { return c.optim.decay_factor; })},
      {"optim.total_epochs", number_key<int>([](auto& c) -> auto& { return c.optim.total_epochs; })},
      {"train.epochs", number_key<S>([](auto& c) -> auto& { return c.train.epochs; })},
      {"train.batch_size", number_key<S>([](auto& c) -> auto& { return c.train.batch_size; })},
      {"train.seed", number_key<std::uint64_t>([](auto& c) -> auto& { return c.train.seed; })},
      {"synthetic.parts", number_key<S>([](auto& c) -> auto& { return c.synthetic.parts; })},
      {"synthetic.points_per_part", number_key<S>([](auto& c) -> auto& { return c.synthetic.points_per_part; })},
      {"synthetic.extent", number_key<double>([](auto& c) -> auto& { return c.synthetic.extent; })},
      {"synthetic.separation", number_key<double>([](auto& c) -> auto& { return c.synthetic.separation; })},
      {"synthetic.translation_min",
       triple_key([](auto& c) -> auto& { return c.synthetic.translation_min; })},
      {"synthetic.translation_max",
       triple_key([](auto& c) -> auto& { return c.synthetic.translation_max; })},
      {"synthetic.max_rotation", number_key<double>([](auto& c) -> auto& { return c.synthetic.max_rotation; })},
      {"synthetic.noise_sigma", number_key<double>([](auto& c) -> auto& { return c.synthetic.noise_sigma; })},
      {"synthetic.seed", number_key<std::uint64_t>([](auto& c) -> auto& { return c.synthetic.seed; })},
  };
  return keys;
}

/// Sets one key; unknown keys and unparsable values throw ContractError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ContractError("config: unknown key '" + key + "'");
  it->second.set(cfg, key, value);
}

/// Applies "key = value" lines; '#' starts a comment, blank lines are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "<config>") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError(source + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str(), path);
  cfg.validate();
  return cfg;
}

/// Every key with its current value, one "key = value" line each.
inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, handler] : config_keys()) out += key + " = " + handler.get(cfg) + "\n";
  return out;
}

}  // namespace spflow
