#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ticl/bench.hpp"

using namespace ticl;
namespace fs = std::filesystem;

TEST_CASE("bench plans are validated") {
  BenchPlan plan;
  plan.row_counts = {64, 64};
  CHECK_THROWS_AS(plan.validate(), ConfigError);
  plan.row_counts = {128, 64};
  CHECK_THROWS_AS(plan.validate(), ConfigError);
  plan.row_counts = {64, 128};
  plan.reps = 2;
  CHECK_THROWS_AS(plan.validate(), ConfigError);
  plan.reps = 3;
  CHECK_NOTHROW(plan.validate());
}

TEST_CASE("log-log slope fit recovers exact power laws") {
  std::vector<double> rows = {64, 128, 256, 512};
  std::vector<double> lin, quad, mixed;
  for (double r : rows) {
    lin.push_back(3e-6 * r);
    quad.push_back(1e-8 * r * r);
    mixed.push_back(2e-7 * std::pow(r, 1.5));
  }
  CHECK(fit_loglog_slope(rows, lin) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit_loglog_slope(rows, quad) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit_loglog_slope(rows, mixed) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK_THROWS_AS(fit_loglog_slope({64}, {1.0}), ContractError);
  CHECK_THROWS_AS(fit_loglog_slope(rows, {1.0, 2.0}), ShapeError);
}

TEST_CASE("a small bench run produces timed cells and a CSV") {
  BenchPlan plan;
  plan.backbones = {Backbone::kUnidirectional};
  plan.row_counts = {32, 64};
  plan.features = 8;
  plan.reps = 3;
  plan.warmup = 1;
  plan.embed_dim = 16;
  plan.hidden_dim = 32;
  plan.num_layers = 1;

  BenchResult res = run_bench(plan);
  REQUIRE(res.cells.size() == 2);
  for (const BenchCell& c : res.cells) {
    CHECK(c.ok());
    CHECK(c.mean_s > 0.0);
    CHECK(std::isfinite(c.se_s));
    CHECK(c.est_peak_bytes > 0);
  }
  CHECK(res.threads == 1);
  CHECK(std::isfinite(res.slopes.at(Backbone::kUnidirectional)));

  const std::string path = (fs::temp_directory_path() / "ticl_bench.csv").string();
  write_bench_csv(path, res);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "backbone,rows,mean_s,se_s,status");
  int rows_read = 0;
  while (std::getline(is, line)) {
    CHECK(line.rfind("unidirectional,", 0) == 0);
    CHECK(line.find(",ok") != std::string::npos);
    ++rows_read;
  }
  CHECK(rows_read == 2);
  fs::remove(path);
}

TEST_CASE("cells over the memory budget become failure rows, not crashes") {
  BenchPlan plan;
  plan.backbones = {Backbone::kAttention};
  plan.row_counts = {32, 512};
  plan.features = 8;
  plan.reps = 3;
  plan.warmup = 0;
  plan.embed_dim = 16;
  plan.hidden_dim = 32;
  plan.num_layers = 1;
  plan.memory_budget_bytes = 1 << 20;  // 1 MiB: the 512-row cell cannot fit

  BenchResult res = run_bench(plan);
  REQUIRE(res.cells.size() == 2);
  CHECK_FALSE(res.cells[1].ok());
  CHECK(res.cells[1].status.rfind("failed:memory-budget", 0) == 0);
  CHECK(std::isnan(res.cells[1].mean_s));
  // A single surviving cell is not enough for a slope.
  CHECK(std::isnan(res.slopes.at(Backbone::kAttention)));

  const std::string path = (fs::temp_directory_path() / "ticl_bench_fail.csv").string();
  write_bench_csv(path, res);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  std::getline(is, line);
  std::getline(is, line);
  CHECK(line.find("attention,512,,,failed:memory-budget") == 0);
  fs::remove(path);
}
