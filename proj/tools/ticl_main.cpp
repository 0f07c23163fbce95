#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ticl/bench.hpp"
#include "ticl/checkpoint.hpp"
#include "ticl/config.hpp"
#include "ticl/csv.hpp"
#include "ticl/errors.hpp"
#include "ticl/infer.hpp"
#include "ticl/metrics.hpp"
#include "ticl/model.hpp"
#include "ticl/prior.hpp"
#include "ticl/rng.hpp"
#include "ticl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ticl::RunConfig make_config(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                            const std::string& out_dir, const std::string& label_column,
                            const std::string& backbone, const std::optional<int>& r) {
  ticl::RunConfig cfg;
  if (!config_path.empty()) ticl::apply_config(cfg, ticl::parse_config_file(config_path));
  if (seed) cfg.seed = *seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!label_column.empty()) cfg.label_column = label_column;
  if (!backbone.empty()) cfg.model.backbone = ticl::backbone_from_name(backbone);
  if (r) cfg.rcp.r = *r;
  cfg.rcp.validate();
  return cfg;
}

int argmax_row(const ticl::MatD& P, Eigen::Index i) {
  int best = 0;
  for (Eigen::Index j = 1; j < P.cols(); ++j)
    if (P(i, j) > P(i, best)) best = static_cast<int>(j);
  return best;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(ticl::RunConfig cfg) {
  fs::create_directories(cfg.out_dir);
  cfg.train.seed = cfg.seed;
  const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.ckpt").string();
  cfg.train.checkpoint_path = ckpt_path;

  ticl::PfnModelD model = ticl::init_model(cfg.model);
  std::cout << "training " << ticl::backbone_name(cfg.model.backbone) << ": " << cfg.train.epochs
            << " epochs x " << cfg.train.steps_per_epoch << " steps, batch " << cfg.train.batch_size
            << " x " << cfg.train.aggregate << " aggregated, seed " << cfg.seed << "\n";

  ticl::TrainResult res = ticl::meta_train(std::move(model), cfg.prior, cfg.train);

  if (cfg.train.val_tasks == 0) {
    // No validation pass ran, so nothing was checkpointed yet: keep the final weights.
    const std::uint64_t steps = res.curve.empty() ? 0 : res.curve.back().step;
    ticl::save_checkpoint(ticl::Checkpoint{res.best_model, steps, cfg.train.seed, false, {}},
                          ckpt_path);
  }
  const std::string curve_path = (fs::path(cfg.out_dir) / "loss_curve.csv").string();
  ticl::write_loss_curve(curve_path, res.curve);

  std::cout << std::setprecision(6);
  if (!res.curve.empty())
    std::cout << "final loss " << res.curve.back().loss << " after " << res.curve.back().step
              << " steps\n";
  if (cfg.train.val_tasks > 0)
    std::cout << "best validation accuracy " << res.best_val_accuracy << "\n";
  std::cout << "wrote " << ckpt_path << "\nwrote " << curve_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct DatasetEval {
  std::string name;
  bool skipped = false;
  std::string reason;
  int rows = 0;
  int features = 0;
  int classes = 0;
  // Keyed by r; one entry per split. AUC is NaN where the test side has fewer
  // than two classes present.
  std::map<int, std::vector<double>> acc;
  std::map<int, std::vector<double>> auc;
  std::map<int, std::vector<double>> order_kl;
};

DatasetEval eval_dataset(const ticl::PfnModelD& model, const ticl::RunConfig& cfg,
                         const std::string& path, const std::vector<int>& r_values,
                         bool with_order) {
  DatasetEval ev;
  ev.name = fs::path(path).filename().string();
  const ticl::CsvDataset d = ticl::load_csv(path, cfg.label_column);
  ev.rows = d.rows();
  ev.features = d.features();
  ev.classes = d.classes();

  const ticl::ModelConfig& mc = model.cfg;
  auto skip = [&](const std::string& why) {
    ev.skipped = true;
    ev.reason = why;
    return ev;
  };
  if (d.features() > mc.max_features)
    return skip("features " + std::to_string(d.features()) + " > model max_features " +
                std::to_string(mc.max_features));
  if (d.classes() > mc.max_classes)
    return skip("classes " + std::to_string(d.classes()) + " > model max_classes " +
                std::to_string(mc.max_classes));
  if (d.classes() < 2) return skip("needs at least 2 classes");
  if (d.rows() < 4) return skip("needs at least 4 rows to split");

  const ticl::SplitPlan plan =
      ticl::make_splits(d.rows(), ticl::sub_seed(cfg.seed, ticl::fnv1a64(ev.name)));
  for (const ticl::Split& s : plan.splits) {
    const ticl::CsvDataset tr = ticl::take_rows(d, s.train_idx);
    const ticl::CsvDataset te = ticl::take_rows(d, s.test_idx);
    for (std::size_t ri = 0; ri < r_values.size(); ++ri) {
      const int r = r_values[ri];
      const ticl::RcpConfig rc{r, ticl::sub_seed(s.seed, 1)};
      const ticl::MatD P = ticl::rcp_predict(model, tr.X, tr.y, te.X, rc);
      const ticl::MatD Pk = P.leftCols(d.classes());
      ev.acc[r].push_back(ticl::accuracy(Pk, te.y));
      double a = std::numeric_limits<double>::quiet_NaN();
      try {
        a = ticl::auc_ovo(Pk, te.y).auc;
      } catch (const ticl::ContractError&) {
        // fewer than two classes present on this test side
      }
      ev.auc[r].push_back(a);
      if (with_order) {
        ticl::TabularTask task;
        task.X = ticl::MatD(tr.rows() + te.rows(), d.features());
        task.X << tr.X, te.X;
        task.y = tr.y;
        task.y.insert(task.y.end(), te.y.begin(), te.y.end());
        task.context_count = tr.rows();
        task.num_classes = d.classes();
        ev.order_kl[r].push_back(ticl::order_sensitivity(
            model, task, cfg.order.trials, ticl::sub_seed(s.seed, 100 + ri), r));
      }
    }
  }
  return ev;
}

std::vector<DatasetEval> eval_all(const ticl::PfnModelD& model, const ticl::RunConfig& cfg,
                                  const std::vector<std::string>& paths,
                                  const std::vector<int>& r_values, bool with_order, int jobs) {
  std::vector<DatasetEval> out(paths.size());
  if (jobs <= 1 || paths.size() <= 1) {
    for (std::size_t i = 0; i < paths.size(); ++i)
      out[i] = eval_dataset(model, cfg, paths[i], r_values, with_order);
    return out;
  }
  // Datasets are independent; results land in slots indexed by input order, so
  // the report is identical no matter how the workers interleave.
  std::vector<std::exception_ptr> errors(paths.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < paths.size(); i = next++) {
      try {
        out[i] = eval_dataset(model, cfg, paths[i], r_values, with_order);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), paths.size());
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

json mean_se_json(const std::vector<double>& xs) {
  json m;
  std::vector<double> finite;
  for (double x : xs)
    if (std::isfinite(x)) finite.push_back(x);
  if (finite.empty()) {
    m["mean"] = nullptr;
    m["se"] = nullptr;
  } else {
    const ticl::MeanSe ms = ticl::mean_and_se(finite);
    m["mean"] = ms.mean;
    m["se"] = ms.se;
  }
  m["splits_used"] = finite.size();
  return m;
}

int cmd_evaluate(const ticl::RunConfig& cfg, const std::string& checkpoint_path,
                 const std::vector<std::string>& datasets, const std::string& compare_path,
                 bool rcp_sweep, bool with_order, int jobs) {
  fs::create_directories(cfg.out_dir);
  const ticl::Checkpoint ck = ticl::load_checkpoint(checkpoint_path);
  const std::vector<int> r_values = rcp_sweep ? cfg.order.r_values : std::vector<int>{cfg.rcp.r};

  const std::vector<DatasetEval> evals =
      eval_all(ck.model, cfg, datasets, r_values, with_order, jobs);

  const std::string csv_path = (fs::path(cfg.out_dir) / "evaluation.csv").string();
  {
    std::ofstream os(csv_path);
    if (!os) throw ticl::IoError("evaluate: cannot open " + csv_path);
    os << "dataset,split,r,accuracy,auc_ovo\n" << std::setprecision(17);
    for (const DatasetEval& ev : evals) {
      if (ev.skipped) continue;
      const std::size_t n_splits = ev.acc.at(r_values.front()).size();
      for (std::size_t s = 0; s < n_splits; ++s)
        for (int r : r_values) {
          os << ev.name << ',' << s << ',' << r << ',' << ev.acc.at(r)[s] << ',';
          if (std::isfinite(ev.auc.at(r)[s])) os << ev.auc.at(r)[s];
          os << '\n';
        }
    }
  }

  json summary;
  summary["checkpoint"] = checkpoint_path;
  summary["seed"] = cfg.seed;
  summary["label_column"] = cfg.label_column;
  summary["r_values"] = r_values;
  summary["datasets"] = json::array();
  summary["skipped"] = json::array();
  for (const DatasetEval& ev : evals) {
    if (ev.skipped) {
      summary["skipped"].push_back({{"dataset", ev.name}, {"reason", ev.reason}});
      continue;
    }
    json e;
    e["dataset"] = ev.name;
    e["rows"] = ev.rows;
    e["features"] = ev.features;
    e["classes"] = ev.classes;
    e["metrics"] = json::array();
    for (int r : r_values) {
      json m;
      m["r"] = r;
      m["accuracy"] = mean_se_json(ev.acc.at(r));
      m["auc_ovo"] = mean_se_json(ev.auc.at(r));
      if (with_order) m["order_kl"] = mean_se_json(ev.order_kl.at(r));
      e["metrics"].push_back(m);
    }
    summary["datasets"].push_back(e);
  }

  if (!compare_path.empty()) {
    const ticl::Checkpoint other = ticl::load_checkpoint(compare_path);
    const std::vector<DatasetEval> other_evals =
        eval_all(other.model, cfg, datasets, r_values, false, jobs);
    json cmp;
    cmp["checkpoint"] = compare_path;
    cmp["wilcoxon"] = json::array();
    for (std::size_t i = 0; i < evals.size(); ++i) {
      if (evals[i].skipped) continue;
      for (int r : r_values) {
        json w;
        w["dataset"] = evals[i].name;
        w["r"] = r;
        if (other_evals[i].skipped) {
          w["p"] = nullptr;
          w["reason"] = "comparison checkpoint skipped dataset: " + other_evals[i].reason;
        } else {
          w["p"] = ticl::wilcoxon_signed_rank(evals[i].acc.at(r), other_evals[i].acc.at(r));
          w["accuracy_mean_other"] = mean_se_json(other_evals[i].acc.at(r))["mean"];
        }
        cmp["wilcoxon"].push_back(w);
      }
    }
    summary["comparison"] = cmp;
  }

  const std::string json_path = (fs::path(cfg.out_dir) / "evaluation_summary.json").string();
  {
    std::ofstream os(json_path);
    if (!os) throw ticl::IoError("evaluate: cannot open " + json_path);
    os << summary.dump(2) << '\n';
  }

  std::cout << std::setprecision(4);
  for (const DatasetEval& ev : evals) {
    if (ev.skipped) {
      std::cout << ev.name << ": skipped (" << ev.reason << ")\n";
      continue;
    }
    std::cout << ev.name << " [" << ev.rows << " rows, " << ev.features << " features, "
              << ev.classes << " classes]";
    for (int r : r_values) {
      const ticl::MeanSe ms = ticl::mean_and_se(ev.acc.at(r));
      std::cout << "  r=" << r << ": acc " << ms.mean << " +/- " << ms.se;
    }
    std::cout << "\n";
  }
  std::cout << "wrote " << csv_path << "\nwrote " << json_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// order-sensitivity

int cmd_order_sensitivity(const ticl::RunConfig& cfg, const std::string& checkpoint_path) {
  fs::create_directories(cfg.out_dir);
  cfg.order.validate();
  const ticl::Checkpoint ck = ticl::load_checkpoint(checkpoint_path);
  const ticl::ModelConfig& mc = ck.model.cfg;
  if (cfg.prior.max_features > mc.max_features)
    throw ticl::ConfigError("order-sensitivity: prior max_features " +
                            std::to_string(cfg.prior.max_features) + " exceeds model limit " +
                            std::to_string(mc.max_features));
  if (cfg.prior.max_classes > mc.max_classes)
    throw ticl::ConfigError("order-sensitivity: prior max_classes " +
                            std::to_string(cfg.prior.max_classes) + " exceeds model limit " +
                            std::to_string(mc.max_classes));

  std::vector<ticl::TabularTask> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.order.tasks));
  const std::uint64_t task_seed = ticl::sub_seed(cfg.seed, 2);
  for (int t = 0; t < cfg.order.tasks; ++t)
    tasks.push_back(ticl::sample_task(cfg.prior, ticl::sub_seed(task_seed, t)));

  const std::uint64_t kl_seed = ticl::sub_seed(cfg.seed, 3);
  const std::uint64_t acc_seed = ticl::sub_seed(cfg.seed, 4);
  const std::size_t R = cfg.order.r_values.size();

  const std::string csv_path = (fs::path(cfg.out_dir) / "order_sensitivity.csv").string();
  std::ofstream os(csv_path);
  if (!os) throw ticl::IoError("order-sensitivity: cannot open " + csv_path);
  os << "r,mean_kl,mean_accuracy,ci95_low,ci95_high\n" << std::setprecision(17);

  std::cout << std::setprecision(6);
  for (std::size_t ri = 0; ri < R; ++ri) {
    const int r = cfg.order.r_values[ri];
    std::vector<double> kls, accs;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const ticl::TabularTask& task = tasks[t];
      const std::uint64_t tag = static_cast<std::uint64_t>(t) * R + ri;
      kls.push_back(ticl::order_sensitivity(ck.model, task, cfg.order.trials,
                                            ticl::sub_seed(kl_seed, tag), r));
      const ticl::RcpConfig rc{r, ticl::sub_seed(acc_seed, tag)};
      const ticl::MatD P = ticl::rcp_predict(ck.model, task.context_X(), task.context_y(),
                                             task.query_X(), rc);
      accs.push_back(ticl::accuracy(P.leftCols(task.num_classes), task.query_y()));
    }
    const ticl::MeanSe mk = ticl::mean_and_se(kls);
    const ticl::MeanSe ma = ticl::mean_and_se(accs);
    os << r << ',' << mk.mean << ',' << ma.mean << ',' << mk.mean - 1.96 * mk.se << ','
       << mk.mean + 1.96 * mk.se << '\n';
    std::cout << "r=" << r << ": mean KL " << mk.mean << ", mean accuracy " << ma.mean << "\n";
  }
  std::cout << "wrote " << csv_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const ticl::RunConfig& cfg, const std::string& backbone) {
  fs::create_directories(cfg.out_dir);
  ticl::BenchPlan plan = cfg.bench;
  plan.seed = cfg.seed;
  if (!backbone.empty()) plan.backbones = {ticl::backbone_from_name(backbone)};
  plan.validate();

  const ticl::BenchResult res = ticl::run_bench(plan);

  const std::string csv_path = (fs::path(cfg.out_dir) / "bench.csv").string();
  ticl::write_bench_csv(csv_path, res);

  json summary;
  summary["threads"] = res.threads;
  summary["row_counts"] = plan.row_counts;
  summary["features"] = plan.features;
  summary["slopes"] = json::object();
  for (const auto& [b, slope] : res.slopes)
    summary["slopes"][ticl::backbone_name(b)] = std::isfinite(slope) ? json(slope) : json(nullptr);
  const std::string json_path = (fs::path(cfg.out_dir) / "bench_summary.json").string();
  {
    std::ofstream os(json_path);
    if (!os) throw ticl::IoError("bench: cannot open " + json_path);
    os << summary.dump(2) << '\n';
  }

  std::cout << std::setprecision(3);
  for (const auto& [b, slope] : res.slopes)
    std::cout << ticl::backbone_name(b) << ": log-log slope " << slope << "\n";
  std::cout << "wrote " << csv_path << "\nwrote " << json_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict

int cmd_predict(const ticl::RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& context_csv, const std::string& query_csv,
                const std::string& out_path, bool one_by_one) {
  const ticl::Checkpoint ck = ticl::load_checkpoint(checkpoint_path);
  const ticl::ModelConfig& mc = ck.model.cfg;

  const ticl::CsvDataset ctx = ticl::load_csv(context_csv, cfg.label_column);
  // Query rows may arrive without the label column; if present it is ignored.
  const ticl::CsvDataset q = ticl::load_csv(query_csv, cfg.label_column, false);

  if (ctx.features() != q.features())
    throw ticl::DataError("predict: context has " + std::to_string(ctx.features()) +
                          " features, query has " + std::to_string(q.features()));
  if (ctx.features() > mc.max_features)
    throw ticl::DataError("predict: " + std::to_string(ctx.features()) +
                          " features exceed model max_features " + std::to_string(mc.max_features));
  if (ctx.classes() > mc.max_classes)
    throw ticl::DataError("predict: " + std::to_string(ctx.classes()) +
                          " classes exceed model max_classes " + std::to_string(mc.max_classes));

  ticl::MatD P;
  if (cfg.rcp.r <= 1) {
    P = ticl::predict(ck.model, ctx.X, ctx.y, q.X, one_by_one);
  } else {
    const ticl::RcpConfig rc{cfg.rcp.r, cfg.seed};
    P = ticl::rcp_predict(ck.model, ctx.X, ctx.y, q.X, rc, one_by_one);
  }
  // Model slots beyond the context's classes carry stray probability mass;
  // renormalize over the classes that actually exist here.
  ticl::MatD Pk = P.leftCols(ctx.classes());
  for (Eigen::Index i = 0; i < Pk.rows(); ++i) Pk.row(i) /= Pk.row(i).sum();

  std::string path = out_path;
  if (path.empty()) {
    fs::create_directories(cfg.out_dir);
    path = (fs::path(cfg.out_dir) / "predictions.csv").string();
  } else if (fs::path(path).has_parent_path()) {
    fs::create_directories(fs::path(path).parent_path());
  }
  std::ofstream os(path);
  if (!os) throw ticl::IoError("predict: cannot open " + path);
  for (const std::string& name : ctx.class_names) os << "prob_" << name << ',';
  os << "predicted_label\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < Pk.rows(); ++i) {
    for (Eigen::Index j = 0; j < Pk.cols(); ++j) os << Pk(i, j) << ',';
    os << ctx.class_names[static_cast<std::size_t>(argmax_row(Pk, i))] << '\n';
  }
  if (!os) throw ticl::IoError("predict: write to " + path + " failed");

  std::cout << "predicted " << Pk.rows() << " rows over " << ctx.classes() << " classes (r="
            << cfg.rcp.r << ")\nwrote " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tabular in-context learner"};
  app.require_subcommand(1);

  std::string config_path, out_dir, label_column, backbone, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> r;
  auto add_common = [&](CLI::App* s, bool with_checkpoint) {
    s->add_option("--config", config_path, "key=value config file with [section] headers");
    s->add_option("--seed", seed, "global seed (overrides config)");
    s->add_option("--out-dir", out_dir, "output directory (overrides config)");
    s->add_option("--label-column", label_column, "label column name (default: label)");
    if (with_checkpoint)
      s->add_option("--checkpoint", checkpoint, "model checkpoint path")->required();
  };

  CLI::App* train = app.add_subcommand("train", "meta-train on synthetic tasks");
  add_common(train, false);
  train->add_option("--backbone", backbone, "attention|unidirectional|bidirectional");

  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on CSV datasets");
  add_common(evaluate, true);
  std::vector<std::string> datasets;
  std::string compare_checkpoint;
  bool rcp_sweep = false, eval_order = false;
  int jobs = 1;
  evaluate->add_option("datasets", datasets, "dataset CSV paths")->required();
  evaluate->add_option("--r", r, "context permutation passes per prediction");
  evaluate->add_option("--compare-checkpoint", compare_checkpoint,
                       "second checkpoint; adds per-dataset signed-rank tests");
  evaluate->add_flag("--rcp-sweep", rcp_sweep, "evaluate every r in the configured sweep list");
  evaluate->add_flag("--order-sensitivity", eval_order, "also report per-split order sensitivity");
  evaluate->add_option("--jobs", jobs, "datasets evaluated in parallel")->check(CLI::PositiveNumber);

  CLI::App* order = app.add_subcommand("order-sensitivity",
                                       "prediction spread vs permutation passes on fresh tasks");
  add_common(order, true);

  CLI::App* bench = app.add_subcommand("bench", "runtime vs sequence length");
  add_common(bench, false);
  bench->add_option("--backbone", backbone, "restrict to one backbone");

  CLI::App* predict = app.add_subcommand("predict", "emit per-row class probabilities");
  add_common(predict, true);
  std::string context_csv, query_csv, predictions_out;
  bool one_by_one = false;
  predict->add_option("--context", context_csv, "labeled context CSV")->required();
  predict->add_option("--query", query_csv, "query CSV (label column optional, ignored)")
      ->required();
  predict->add_option("--r", r, "context permutation passes per prediction");
  predict->add_option("--out", predictions_out, "output CSV (default <out-dir>/predictions.csv)");
  predict->add_flag("--one-by-one", one_by_one, "score each query row in isolation");

  try {
    app.parse(argc, argv);
    const ticl::RunConfig cfg =
        make_config(config_path, seed, out_dir, label_column, backbone, r);
    if (app.got_subcommand(train)) return cmd_train(cfg);
    if (app.got_subcommand(evaluate))
      return cmd_evaluate(cfg, checkpoint, datasets, compare_checkpoint, rcp_sweep, eval_order,
                          jobs);
    if (app.got_subcommand(order)) return cmd_order_sensitivity(cfg, checkpoint);
    if (app.got_subcommand(bench)) return cmd_bench(cfg, backbone);
    if (app.got_subcommand(predict))
      return cmd_predict(cfg, checkpoint, context_csv, query_csv, predictions_out, one_by_one);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the usage error
    return code == 0 ? 0 : 1;
  } catch (const ticl::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ticl::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ticl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {  // config, shape, contract: usage-class failures
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
