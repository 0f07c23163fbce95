#pragma once

// Evaluation mathematics: KL divergence and the order-sensitivity protocol,
// accuracy, one-vs-one AUC (Hand-Till construction), the Wilcoxon signed-rank
// test, and repeated random train/test splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/infer.hpp"
#include "ticl/model.hpp"
#include "ticl/prior.hpp"
#include "ticl/rng.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

// Sum of P_i ln(P_i/Q_i). Entries with P_i = 0 contribute nothing; everything
// else is clamped below at 1e-12 before the ratio, which keeps the value
// finite when Q underflows and makes KL(P, P) exactly zero.
inline double kl_divergence(const Eigen::Ref<const Eigen::RowVectorXd>& p,
                            const Eigen::Ref<const Eigen::RowVectorXd>& q) {
  if (p.size() != q.size())
    throw ShapeError("kl_divergence: length mismatch " + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()));
  double out = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0) continue;
    const double pi = std::max(p(i), 1e-12);
    const double qi = std::max(q(i), 1e-12);
    out += pi * std::log(pi / qi);
  }
  return out;
}

// Argmax match rate over rows; ties break toward the lowest class index.
inline double accuracy(const MatD& preds, const std::vector<int>& targets) {
  if (static_cast<std::size_t>(preds.rows()) != targets.size())
    throw ShapeError("accuracy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(preds.rows()) + " prediction rows");
  if (preds.rows() == 0) throw ContractError("accuracy: no rows");
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < preds.rows(); ++i) {
    int arg = 0;
    for (Eigen::Index j = 1; j < preds.cols(); ++j)
      if (preds(i, j) > preds(i, arg)) arg = static_cast<int>(j);
    hits += (arg == targets[static_cast<std::size_t>(i)]);
  }
  return static_cast<double>(hits) / static_cast<double>(preds.rows());
}

namespace detail {

// 1-based ranks with tied values sharing the average of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double shared = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

// Mann-Whitney AUC from scores: probability that a positive outranks a
// negative, ties counting one half. Rank-based, O(n log n).
inline double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::vector<double> ranks = average_ranks(scores);
  double pos_rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      pos_rank_sum += ranks[i];
      ++n_pos;
    }
  }
  const std::size_t n_neg = scores.size() - n_pos;
  return (pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace detail

struct AucOvoResult {
  double auc = std::numeric_limits<double>::quiet_NaN();
  int pairs_used = 0;
  int pairs_skipped = 0;  // class pairs with an empty side, left out of the mean
};

// Mean over unordered class pairs (i, j) of the two-class AUC restricted to
// rows labeled i or j, scoring class i by p_i/(p_i + p_j). Both orientations
// of each pair are averaged (Hand-Till); pairs missing a side are skipped and
// counted in the result.
inline AucOvoResult auc_ovo(const MatD& preds, const std::vector<int>& targets) {
  if (static_cast<std::size_t>(preds.rows()) != targets.size())
    throw ShapeError("auc_ovo: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(preds.rows()) + " prediction rows");
  const int classes = static_cast<int>(preds.cols());
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (int t : targets) {
    if (t < 0 || t >= classes)
      throw ContractError("auc_ovo: target " + std::to_string(t) + " outside [0, " +
                          std::to_string(classes) + ")");
    ++counts[static_cast<std::size_t>(t)];
  }
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
    throw ContractError("auc_ovo: need at least 2 classes present in targets");

  AucOvoResult res;
  double total = 0;
  for (int i = 0; i < classes; ++i) {
    for (int j = i + 1; j < classes; ++j) {
      if (counts[static_cast<std::size_t>(i)] == 0 || counts[static_cast<std::size_t>(j)] == 0) {
        ++res.pairs_skipped;
        continue;
      }
      std::vector<double> score_i, score_j;
      std::vector<bool> is_i, is_j;
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] != i && targets[r] != j) continue;
        const double pi = preds(static_cast<Eigen::Index>(r), i);
        const double pj = preds(static_cast<Eigen::Index>(r), j);
        const double denom = pi + pj;
        score_i.push_back(denom > 0 ? pi / denom : 0.5);
        score_j.push_back(denom > 0 ? pj / denom : 0.5);
        is_i.push_back(targets[r] == i);
        is_j.push_back(targets[r] == j);
      }
      const double a_ij = detail::rank_auc(score_i, is_i);
      const double a_ji = detail::rank_auc(score_j, is_j);
      total += 0.5 * (a_ij + a_ji);
      ++res.pairs_used;
    }
  }
  res.auc = total / res.pairs_used;
  return res;
}

// Two-sided Wilcoxon signed-rank p-value for paired scores. Zero differences
// are dropped; tied |difference| values share average ranks. Up to 25 nonzero
// pairs the null distribution of the rank sum is built exactly by dynamic
// programming over sign patterns; beyond that a normal approximation with
// tie correction and continuity correction takes over. All-zero differences
// define p = 1.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ShapeError("wilcoxon_signed_rank: length mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  std::vector<double> absd;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d == 0) continue;
    absd.push_back(std::abs(d));
    positive.push_back(d > 0);
  }
  const std::size_t n = absd.size();
  if (n == 0) return 1.0;

  const std::vector<double> ranks = detail::average_ranks(absd);
  double w_plus = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) w_plus += ranks[i];

  if (n <= 25) {
    // Work in doubled ranks so half-integer average ranks stay integral.
    std::vector<long long> dr(n);
    long long total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dr[i] = std::llround(2.0 * ranks[i]);
      total += dr[i];
    }
    std::vector<double> freq(static_cast<std::size_t>(total) + 1, 0.0);
    freq[0] = 1.0;
    long long hi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (long long s = hi; s >= 0; --s)
        if (freq[static_cast<std::size_t>(s)] > 0)
          freq[static_cast<std::size_t>(s + dr[i])] += freq[static_cast<std::size_t>(s)];
      hi += dr[i];
    }
    const double denom = std::pow(2.0, static_cast<double>(n));
    const long long w2 = std::llround(2.0 * w_plus);
    double below = 0, above = 0;
    for (long long s = 0; s <= total; ++s) {
      if (s <= w2) below += freq[static_cast<std::size_t>(s)];
      if (s >= w2) above += freq[static_cast<std::size_t>(s)];
    }
    return std::min(1.0, 2.0 * std::min(below, above) / denom);
  }

  const double nn = static_cast<double>(n);
  double tie_term = 0;
  {
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  const double mu = nn * (nn + 1.0) / 4.0;
  const double sigma = std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0);
  double z = 0;
  if (w_plus > mu) z = (w_plus - 0.5 - mu) / sigma;
  else if (w_plus < mu) z = (w_plus + 0.5 - mu) / sigma;
  return std::min(1.0, 2.0 * (1.0 - detail::normal_cdf(std::abs(z))));
}

// Mean symmetrized KL between predictions made over independently shuffled
// contexts: per trial, two r-permutation-averaged predictions are compared
// row by row with (KL(P||Q) + KL(Q||P)) / 2 and averaged over query rows.
// Trial t draws its two shuffle streams from sub_seed(seed, 2t) and
// sub_seed(seed, 2t+1).
inline double order_sensitivity(const PfnModelD& model, const TabularTask& task, int trials,
                                std::uint64_t seed, int r = 1) {
  if (trials < 1) throw ContractError("order_sensitivity: trials must be >= 1");
  const MatD Xc = task.context_X();
  const MatD Xq = task.query_X();
  const std::vector<int> yc = task.context_y();
  double total = 0;
  for (int t = 0; t < trials; ++t) {
    const RcpConfig ca{r, sub_seed(seed, 2 * static_cast<std::uint64_t>(t))};
    const RcpConfig cb{r, sub_seed(seed, 2 * static_cast<std::uint64_t>(t) + 1)};
    const Distributions pa = rcp_predict(model, Xc, yc, Xq, ca);
    const Distributions pb = rcp_predict(model, Xc, yc, Xq, cb);
    double rows = 0;
    for (Eigen::Index i = 0; i < pa.rows(); ++i)
      rows += 0.5 * (kl_divergence(pa.row(i), pb.row(i)) + kl_divergence(pb.row(i), pa.row(i)));
    total += rows / static_cast<double>(pa.rows());
  }
  return total / trials;
}

struct Split {
  std::uint64_t seed = 0;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};

struct SplitPlan {
  int n_rows = 0;
  double train_fraction = 0.5;
  std::vector<Split> splits;
};

// `count` independent train/test splits of n_rows, deterministic per seed.
// Both sides always get at least one row.
inline SplitPlan make_splits(int n_rows, std::uint64_t seed, double train_fraction = 0.5,
                             int count = 16) {
  if (n_rows < 4) throw ContractError("make_splits: need at least 4 rows, got " +
                                      std::to_string(n_rows));
  if (train_fraction <= 0 || train_fraction >= 1)
    throw ContractError("make_splits: train_fraction must lie in (0, 1)");
  if (count < 1) throw ContractError("make_splits: count must be >= 1");
  SplitPlan plan;
  plan.n_rows = n_rows;
  plan.train_fraction = train_fraction;
  long long want = std::llround(train_fraction * n_rows);
  const int train_n = static_cast<int>(std::clamp<long long>(want, 1, n_rows - 1));
  for (int s = 0; s < count; ++s) {
    Split sp;
    sp.seed = sub_seed(seed, static_cast<std::uint64_t>(s));
    Rng rng(sp.seed);
    std::vector<int> perm = rng.permutation(n_rows);
    sp.train_idx.assign(perm.begin(), perm.begin() + train_n);
    sp.test_idx.assign(perm.begin() + train_n, perm.end());
    std::sort(sp.train_idx.begin(), sp.train_idx.end());
    std::sort(sp.test_idx.begin(), sp.test_idx.end());
    plan.splits.push_back(std::move(sp));
  }
  return plan;
}

struct MeanSe {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();  // sample stddev / sqrt(n)
};

inline MeanSe mean_and_se(const std::vector<double>& xs) {
  if (xs.empty()) throw ContractError("mean_and_se: no values");
  MeanSe out;
  const double n = static_cast<double>(xs.size());
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() == 1) {
    out.se = 0;
    return out;
  }
  double ss = 0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

struct MetricReport {
  std::vector<double> split_accuracy;
  std::vector<double> split_auc;
  MeanSe accuracy;
  MeanSe auc;
};

inline MetricReport summarize(std::vector<double> split_accuracy, std::vector<double> split_auc) {
  if (split_accuracy.size() != split_auc.size())
    throw ShapeError("summarize: accuracy and AUC lists differ in length");
  MetricReport rep;
  rep.accuracy = mean_and_se(split_accuracy);
  rep.auc = mean_and_se(split_auc);
  rep.split_accuracy = std::move(split_accuracy);
  rep.split_auc = std::move(split_auc);
  return rep;
}

}  // namespace ticl
