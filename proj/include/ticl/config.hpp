#pragma once

// Flat key=value run configuration with [section] headers. Every key must be
// recognized — a typo fails the run naming the offending key before any
// computation starts. '#' begins a comment; blank lines are ignored.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ticl/bench.hpp"
#include "ticl/csv.hpp"
#include "ticl/errors.hpp"
#include "ticl/infer.hpp"
#include "ticl/model.hpp"
#include "ticl/prior.hpp"
#include "ticl/train.hpp"

namespace ticl {

struct OrderSensitivityConfig {
  std::vector<int> r_values = {1, 2, 4, 8};
  int tasks = 30;
  int trials = 1;  // permutation-pair comparisons per task and r

  void validate() const {
    if (r_values.empty()) throw ConfigError("order: r_values must be nonempty");
    for (int r : r_values)
      if (r < 1) throw ConfigError("order: r_values entries must be >= 1");
    if (tasks < 1) throw ConfigError("order: tasks must be >= 1");
    if (trials < 1) throw ConfigError("order: trials must be >= 1");
  }
};

// Merged view of everything a run needs. Key names follow the training
// hyperparameter table (learning_rate, batch_size, steps_per_epoch,
// aggregate_k_gradients, embedding_size, num_layers, num_heads).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PriorConfig prior;
  RcpConfig rcp{1, 0};  // CLI-facing default: one pass
  BenchPlan bench;
  OrderSensitivityConfig order;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string label_column = "label";
};

namespace detail {

inline std::int64_t config_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs an integer, got '" + value + "'");
  }
}

inline double config_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs a number, got '" + value + "'");
  }
}

inline std::uint64_t config_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs an unsigned integer, got '" + value + "'");
  }
}

inline std::vector<int> config_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&] {
    const std::string t = trim(cur);
    if (!t.empty()) out.push_back(static_cast<int>(config_int(key, t)));
    cur.clear();
  };
  for (char c : value) {
    if (c == ',') flush();
    else cur += c;
  }
  flush();
  if (out.empty()) throw ConfigError("config: key '" + key + "' needs a comma-separated list");
  return out;
}

}  // namespace detail

// Parses a config file into section-qualified key/value pairs ("[train]" plus
// "learning_rate=..." yields "train.learning_rate"). Duplicate keys are an
// error — silently keeping one of two values would make runs unreproducible.
inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config: " + path + ":" + std::to_string(line_no) +
                          ": malformed section header '" + line + "'");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config: " + path + ":" + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path + ":" + std::to_string(line_no) +
                        ": expected key=value, got '" + line + "'");
    std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: " + path + ":" + std::to_string(line_no) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    if (!kv.emplace(key, value).second)
      throw ConfigError("config: duplicate key '" + key + "' in " + path);
  }
  return kv;
}

// Applies parsed keys onto the run configuration. Unrecognized keys are a
// hard error naming the key.
inline void apply_config(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
  using detail::config_double;
  using detail::config_int;
  using detail::config_int_list;
  using detail::config_u64;
  for (const auto& [key, value] : kv) {
    if (key == "seed") cfg.seed = config_u64(key, value);
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "label_column") cfg.label_column = value;

    else if (key == "model.backbone") cfg.model.backbone = backbone_from_name(value);
    else if (key == "model.embedding_size") cfg.model.embed_dim = static_cast<int>(config_int(key, value));
    else if (key == "model.hidden_size") cfg.model.hidden_dim = static_cast<int>(config_int(key, value));
    else if (key == "model.num_layers") cfg.model.num_layers = static_cast<int>(config_int(key, value));
    else if (key == "model.num_heads") cfg.model.num_heads = static_cast<int>(config_int(key, value));
    else if (key == "model.state_dim") cfg.model.state_dim = static_cast<int>(config_int(key, value));
    else if (key == "model.max_features") cfg.model.max_features = static_cast<int>(config_int(key, value));
    else if (key == "model.max_classes") cfg.model.max_classes = static_cast<int>(config_int(key, value));
    else if (key == "model.seed") cfg.model.seed = config_u64(key, value);

    else if (key == "train.learning_rate") cfg.train.learning_rate = config_double(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = static_cast<int>(config_int(key, value));
    else if (key == "train.steps_per_epoch") cfg.train.steps_per_epoch = static_cast<int>(config_int(key, value));
    else if (key == "train.epochs") cfg.train.epochs = static_cast<int>(config_int(key, value));
    else if (key == "train.aggregate_k_gradients") cfg.train.aggregate = static_cast<int>(config_int(key, value));
    else if (key == "train.weight_decay") cfg.train.weight_decay = config_double(key, value);
    else if (key == "train.beta1") cfg.train.beta1 = config_double(key, value);
    else if (key == "train.beta2") cfg.train.beta2 = config_double(key, value);
    else if (key == "train.eps") cfg.train.eps = config_double(key, value);
    else if (key == "train.val_tasks") cfg.train.val_tasks = static_cast<int>(config_int(key, value));

    else if (key == "prior.min_features") cfg.prior.min_features = static_cast<int>(config_int(key, value));
    else if (key == "prior.max_features") cfg.prior.max_features = static_cast<int>(config_int(key, value));
    else if (key == "prior.min_classes") cfg.prior.min_classes = static_cast<int>(config_int(key, value));
    else if (key == "prior.max_classes") cfg.prior.max_classes = static_cast<int>(config_int(key, value));
    else if (key == "prior.rows") cfg.prior.rows = static_cast<int>(config_int(key, value));
    else if (key == "prior.context_rows") cfg.prior.context_rows = static_cast<int>(config_int(key, value));
    else if (key == "prior.hidden_width") cfg.prior.hidden_width = static_cast<int>(config_int(key, value));
    else if (key == "prior.hidden_depth") cfg.prior.hidden_depth = static_cast<int>(config_int(key, value));
    else if (key == "prior.weight_scale") cfg.prior.weight_scale = config_double(key, value);
    else if (key == "prior.label_noise") cfg.prior.label_noise = config_double(key, value);

    else if (key == "rcp.r") cfg.rcp.r = static_cast<int>(config_int(key, value));

    else if (key == "bench.row_counts") cfg.bench.row_counts = config_int_list(key, value);
    else if (key == "bench.features") cfg.bench.features = static_cast<int>(config_int(key, value));
    else if (key == "bench.query_rows") cfg.bench.query_rows = static_cast<int>(config_int(key, value));
    else if (key == "bench.reps") cfg.bench.reps = static_cast<int>(config_int(key, value));
    else if (key == "bench.warmup") cfg.bench.warmup = static_cast<int>(config_int(key, value));
    else if (key == "bench.memory_budget_mb")
      cfg.bench.memory_budget_bytes = static_cast<std::size_t>(config_int(key, value)) << 20;
    else if (key == "bench.embedding_size") cfg.bench.embed_dim = static_cast<int>(config_int(key, value));
    else if (key == "bench.hidden_size") cfg.bench.hidden_dim = static_cast<int>(config_int(key, value));
    else if (key == "bench.num_layers") cfg.bench.num_layers = static_cast<int>(config_int(key, value));

    else if (key == "order.r_values") cfg.order.r_values = config_int_list(key, value);
    else if (key == "order.tasks") cfg.order.tasks = static_cast<int>(config_int(key, value));
    else if (key == "order.trials") cfg.order.trials = static_cast<int>(config_int(key, value));

    else throw ConfigError("config: unknown key '" + key + "'");
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  apply_config(cfg, parse_config_file(path));
  return cfg;
}

}  // namespace ticl
