#pragma once

// Synthetic classification tasks for meta-training: features from a standard
// normal, scored by a freshly sampled feed-forward network, labels from
// quantile bins of the score, optional label noise, rows shuffled. (seed ->
// task) is a pure function; batches use derived sub-seeds.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/rng.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

struct PriorConfig {
  int min_features = 2;
  int max_features = 10;
  int min_classes = 2;
  int max_classes = 4;
  int rows = 160;
  int context_rows = 128;
  int hidden_width = 16;
  int hidden_depth = 2;
  double weight_scale = 1.0;
  double label_noise = 0.05;

  void validate() const {
    if (min_features < 1 || max_features < min_features)
      throw ConfigError("prior: need 1 <= min_features <= max_features");
    if (min_classes < 2 || max_classes < min_classes)
      throw ConfigError("prior: need 2 <= min_classes <= max_classes");
    if (rows < 2 || context_rows < 1 || context_rows >= rows)
      throw ConfigError("prior: need context_rows in [1, rows-1]");
    if (hidden_depth < 0 || (hidden_depth > 0 && hidden_width < 1))
      throw ConfigError("prior: bad generator network size");
    if (label_noise < 0.0 || label_noise >= 1.0)
      throw ConfigError("prior: label_noise must be in [0, 1)");
  }
};

struct TabularTask {
  MatD X;              // [rows, f]
  std::vector<int> y;  // in [0, num_classes)
  int context_count = 0;
  int num_classes = 0;

  MatD context_X() const { return X.topRows(context_count); }
  MatD query_X() const { return X.bottomRows(X.rows() - context_count); }
  std::vector<int> context_y() const { return {y.begin(), y.begin() + context_count}; }
  std::vector<int> query_y() const { return {y.begin() + context_count, y.end()}; }
};

// Rank-based quantile binning: class of a row is floor(rank * C / n), ties
// broken by row index. Counts per class differ by at most one.
inline std::vector<int> bin_by_quantile(const std::vector<double>& score, int num_classes) {
  const int n = static_cast<int>(score.size());
  if (num_classes < 2 || n < num_classes)
    throw ContractError("bin_by_quantile: need at least one row per class");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return score[static_cast<size_t>(a)] != score[static_cast<size_t>(b)]
               ? score[static_cast<size_t>(a)] < score[static_cast<size_t>(b)]
               : a < b;
  });
  std::vector<int> labels(static_cast<size_t>(n));
  for (int rank = 0; rank < n; ++rank)
    labels[static_cast<size_t>(order[static_cast<size_t>(rank)])] =
        static_cast<int>(static_cast<long long>(rank) * num_classes / n);
  return labels;
}

namespace detail {

// Scalar score per row from a fresh random tanh network (depth 0 = linear).
inline std::vector<double> score_rows(const MatD& X, int width, int depth, double scale, Rng& rng) {
  MatD h = X;
  for (int k = 0; k <= depth; ++k) {
    const Eigen::Index in = h.cols();
    const Eigen::Index out = (k == depth) ? 1 : width;
    MatD w(in, out);
    const double s = scale / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < in; ++i)
      for (Eigen::Index j = 0; j < out; ++j) w(i, j) = s * rng.normal();
    MatD b(1, out);
    for (Eigen::Index j = 0; j < out; ++j) b(0, j) = 0.2 * rng.normal();
    h = (h * w).rowwise() + b.row(0);
    if (k < depth) h = h.array().tanh().matrix();
  }
  std::vector<double> score(static_cast<size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) score[static_cast<size_t>(i)] = h(i, 0);
  return score;
}

}  // namespace detail

inline TabularTask sample_task(const PriorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const int f = cfg.min_features + rng.uniform_int(cfg.max_features - cfg.min_features + 1);
    const int C = cfg.min_classes + rng.uniform_int(cfg.max_classes - cfg.min_classes + 1);
    MatD X(cfg.rows, f);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal();

    std::vector<double> score =
        detail::score_rows(X, cfg.hidden_width, cfg.hidden_depth, cfg.weight_scale, rng);
    std::vector<int> y = bin_by_quantile(score, C);
    for (auto& label : y) {
      if (cfg.label_noise > 0.0 && rng.uniform() < cfg.label_noise) {
        int other = rng.uniform_int(C - 1);
        label = (other >= label) ? other + 1 : other;
      }
    }

    std::vector<int> perm = rng.permutation(cfg.rows);
    TabularTask task;
    task.X = MatD(cfg.rows, f);
    task.y.resize(static_cast<size_t>(cfg.rows));
    for (int i = 0; i < cfg.rows; ++i) {
      task.X.row(i) = X.row(perm[static_cast<size_t>(i)]);
      task.y[static_cast<size_t>(i)] = y[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    task.context_count = cfg.context_rows;
    task.num_classes = C;

    // Every class present anywhere must be present in the context portion.
    std::vector<bool> present(static_cast<size_t>(C), false), in_ctx(static_cast<size_t>(C), false);
    for (int i = 0; i < cfg.rows; ++i) {
      present[static_cast<size_t>(task.y[static_cast<size_t>(i)])] = true;
      if (i < task.context_count) in_ctx[static_cast<size_t>(task.y[static_cast<size_t>(i)])] = true;
    }
    bool ok = true;
    for (int c = 0; c < C; ++c)
      if (present[static_cast<size_t>(c)] && !in_ctx[static_cast<size_t>(c)]) ok = false;
    if (ok) return task;
  }
  throw ContractError("sample_task: no class-covering context in 100 attempts (seed " +
                      std::to_string(seed) + ")");
}

inline std::vector<TabularTask> sample_batch(const PriorConfig& cfg, std::uint64_t seed,
                                             int batch_size) {
  std::vector<TabularTask> tasks;
  tasks.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i)
    tasks.push_back(sample_task(cfg, sub_seed(seed, static_cast<std::uint64_t>(i))));
  return tasks;
}

}  // namespace ticl
