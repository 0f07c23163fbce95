#pragma once

// Runtime-vs-rows benchmark: time one inference forward pass per backbone
// across a doubling grid of row counts, then fit log-log slopes to check the
// complexity story (linear scans vs quadratic attention). Cells that would
// blow the memory budget or fail at runtime become explicit failure rows
// rather than crashes — a failure at some size is itself a datum.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <new>
#include <string>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/infer.hpp"
#include "ticl/metrics.hpp"
#include "ticl/model.hpp"
#include "ticl/rng.hpp"

namespace ticl {

struct BenchPlan {
  std::vector<Backbone> backbones = {Backbone::kAttention, Backbone::kUnidirectional,
                                     Backbone::kBidirectional};
  std::vector<int> row_counts = {32, 64, 128, 256, 512, 1024, 2048, 4096, 8192};  // 2^5..2^13
  int features = 99;
  int query_rows = 16;  // small fixed probe set; the context carries the scaling
  int reps = 10;
  int warmup = 2;
  std::uint64_t seed = 0;
  // Cells whose estimated peak allocation exceeds this are skipped up front.
  std::size_t memory_budget_bytes = std::size_t{3} * 1024 * 1024 * 1024;
  int embed_dim = 64;
  int hidden_dim = 128;
  int num_layers = 3;  // scan backbones get twice this, matching default_config

  void validate() const {
    if (backbones.empty()) throw ConfigError("BenchPlan: no backbones");
    if (row_counts.empty()) throw ConfigError("BenchPlan: no row counts");
    for (std::size_t i = 1; i < row_counts.size(); ++i)
      if (row_counts[i] <= row_counts[i - 1])
        throw ConfigError("BenchPlan: row counts must be strictly increasing");
    if (row_counts.front() < 2) throw ConfigError("BenchPlan: row counts must be >= 2");
    if (features < 1) throw ConfigError("BenchPlan: features must be >= 1");
    if (query_rows < 1) throw ConfigError("BenchPlan: query_rows must be >= 1");
    if (reps < 3) throw ConfigError("BenchPlan: repetitions must be >= 3");
    if (warmup < 0) throw ConfigError("BenchPlan: warmup must be >= 0");
  }
};

struct BenchCell {
  Backbone backbone = Backbone::kAttention;
  int rows = 0;
  double mean_s = std::numeric_limits<double>::quiet_NaN();
  double se_s = std::numeric_limits<double>::quiet_NaN();
  std::size_t est_peak_bytes = 0;
  std::string status = "ok";  // "ok" or "failed:<reason>"

  bool ok() const { return status == "ok"; }
};

struct BenchResult {
  std::vector<BenchCell> cells;
  // Least-squares slope of ln(mean seconds) against ln(rows), fitted over the
  // top half of each backbone's successful sizes; NaN with fewer than two.
  std::map<Backbone, double> slopes;
  int threads = 1;
};

// Least-squares slope of ln(secs) on ln(rows).
inline double fit_loglog_slope(const std::vector<double>& rows, const std::vector<double>& secs) {
  if (rows.size() != secs.size()) throw ShapeError("fit_loglog_slope: length mismatch");
  if (rows.size() < 2) throw ContractError("fit_loglog_slope: need at least 2 points");
  const double n = static_cast<double>(rows.size());
  double mx = 0, my = 0;
  std::vector<double> lx(rows.size()), ly(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] <= 0 || secs[i] <= 0) throw ContractError("fit_loglog_slope: values must be > 0");
    lx[i] = std::log(rows[i]);
    ly[i] = std::log(secs[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

namespace detail {

// Rough peak-allocation estimate for one forward pass, in bytes. Attention
// materializes per-head L x L score matrices (a couple alive at once during
// the softmax); everything else is linear in L.
inline std::size_t bench_peak_estimate(Backbone b, std::size_t L, const BenchPlan& plan) {
  const std::size_t e = static_cast<std::size_t>(plan.embed_dim);
  const std::size_t h = static_cast<std::size_t>(plan.hidden_dim);
  const std::size_t linear = 8 * L * (static_cast<std::size_t>(plan.features) + 8 * e + 2 * h);
  if (b == Backbone::kAttention) return 2 * 8 * L * L + linear;
  return linear;
}

}  // namespace detail

inline ModelConfig bench_model_config(Backbone b, const BenchPlan& plan) {
  ModelConfig cfg;
  cfg.backbone = b;
  cfg.num_layers = (b == Backbone::kAttention) ? plan.num_layers : 2 * plan.num_layers;
  cfg.embed_dim = plan.embed_dim;
  cfg.hidden_dim = plan.hidden_dim;
  cfg.max_features = plan.features;
  cfg.max_classes = 4;
  cfg.seed = plan.seed;
  return cfg;
}

inline BenchResult run_bench(const BenchPlan& plan) {
  plan.validate();
  BenchResult result;
  result.threads = 1;  // the whole forward path is single-threaded

  for (Backbone b : plan.backbones) {
    const PfnModelD model = init_model(bench_model_config(b, plan));
    for (int rows : plan.row_counts) {
      BenchCell cell;
      cell.backbone = b;
      cell.rows = rows;
      const std::size_t L = static_cast<std::size_t>(rows) + static_cast<std::size_t>(plan.query_rows);
      cell.est_peak_bytes = detail::bench_peak_estimate(b, L, plan);
      if (cell.est_peak_bytes > plan.memory_budget_bytes) {
        cell.status = "failed:memory-budget (est " + std::to_string(cell.est_peak_bytes >> 20) +
                      " MiB over " + std::to_string(plan.memory_budget_bytes >> 20) + " MiB)";
        result.cells.push_back(std::move(cell));
        continue;
      }

      try {
        Rng rng(sub_seed(plan.seed, static_cast<std::uint64_t>(rows)));
        MatD Xc(rows, plan.features);
        for (Eigen::Index i = 0; i < Xc.size(); ++i) Xc.data()[i] = rng.normal();
        MatD Xq(plan.query_rows, plan.features);
        for (Eigen::Index i = 0; i < Xq.size(); ++i) Xq.data()[i] = rng.normal();
        std::vector<int> yc;
        yc.reserve(static_cast<std::size_t>(rows));
        for (int i = 0; i < rows; ++i) yc.push_back(rng.uniform_int(model.cfg.max_classes));

        for (int w = 0; w < plan.warmup; ++w) predict(model, Xc, yc, Xq);
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(plan.reps));
        for (int rep = 0; rep < plan.reps; ++rep) {
          const auto t0 = std::chrono::steady_clock::now();
          predict(model, Xc, yc, Xq);
          const auto t1 = std::chrono::steady_clock::now();
          times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        const MeanSe ms = mean_and_se(times);
        cell.mean_s = ms.mean;
        cell.se_s = ms.se;
      } catch (const std::bad_alloc&) {
        cell.status = "failed:out-of-memory";
      } catch (const std::exception& e) {
        cell.status = std::string("failed:") + e.what();
      }
      result.cells.push_back(std::move(cell));
    }

    std::vector<double> ok_rows, ok_secs;
    for (const BenchCell& cell : result.cells)
      if (cell.backbone == b && cell.ok()) {
        ok_rows.push_back(static_cast<double>(cell.rows));
        ok_secs.push_back(cell.mean_s);
      }
    double slope = std::numeric_limits<double>::quiet_NaN();
    const std::size_t top =
        std::max<std::size_t>((ok_rows.size() + 1) / 2, std::min<std::size_t>(ok_rows.size(), 2));
    if (top >= 2) {
      std::vector<double> r(ok_rows.end() - static_cast<std::ptrdiff_t>(top), ok_rows.end());
      std::vector<double> s(ok_secs.end() - static_cast<std::ptrdiff_t>(top), ok_secs.end());
      slope = fit_loglog_slope(r, s);
    }
    result.slopes[b] = slope;
  }
  return result;
}

// One row per cell: backbone,rows,mean_s,se_s,status. Failed cells leave the
// timing columns empty.
inline void write_bench_csv(const std::string& path, const BenchResult& result) {
  std::ofstream os(path);
  if (!os) throw IoError("write_bench_csv: cannot open " + path);
  os << "backbone,rows,mean_s,se_s,status\n";
  os << std::setprecision(9);
  for (const BenchCell& c : result.cells) {
    os << backbone_name(c.backbone) << ',' << c.rows << ',';
    if (c.ok()) os << c.mean_s << ',' << c.se_s;
    else os << ',';
    os << ',' << c.status << '\n';
  }
  if (!os) throw IoError("write_bench_csv: write to " + path + " failed");
}

}  // namespace ticl
