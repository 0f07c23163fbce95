#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ticl/checkpoint.hpp"
#include "ticl/model.hpp"
#include "ticl/optim.hpp"
#include "ticl/prior.hpp"
#include "ticl/train.hpp"

using namespace ticl;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(Backbone b) {
  ModelConfig cfg;
  cfg.backbone = b;
  cfg.num_layers = (b == Backbone::kAttention) ? 1 : 2;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.num_heads = 2;
  cfg.state_dim = 4;
  cfg.max_features = 3;
  cfg.max_classes = 3;
  cfg.seed = 7;
  return cfg;
}

PriorConfig tiny_prior() {
  PriorConfig p;
  p.min_features = 2;
  p.max_features = 3;
  p.min_classes = 2;
  p.max_classes = 3;
  p.rows = 48;
  p.context_rows = 32;
  p.hidden_width = 8;
  p.hidden_depth = 1;
  return p;
}

std::string temp_path(const char* stem) {
  return (fs::temp_directory_path() / stem).string();
}

double max_param_diff(const PfnModelD& a, const PfnModelD& b) {
  double worst = 0;
  for (const auto& [name, pa] : a.params) {
    const MatD& pb = b.params.at(name);
    worst = std::max(worst, (pa - pb).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  VarD logits = constant(MatD(MatD::Zero(5, 4)));
  VarD loss = cross_entropy_masked(logits, {0, 1, 2, 3, 0});
  CHECK(loss.v()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy matches the direct softmax formula") {
  Rng rng(11);
  MatD z(6, 3);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = 3.0 * rng.normal();
  std::vector<int> targets = {2, 0, 1, 1, 0, 2};

  double expect = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double denom = z.row(i).array().exp().sum();
    expect += -std::log(std::exp(z(i, targets[static_cast<std::size_t>(i)])) / denom);
  }
  expect /= static_cast<double>(z.rows());

  VarD loss = cross_entropy_masked(constant(z), targets);
  CHECK(ticl_test::rel_err(loss.v()(0, 0), expect) < 1e-12);
}

TEST_CASE("cross entropy is stable for saturated logits") {
  MatD z(1, 3);
  z << 1000.0, 0.0, -1000.0;
  CHECK(cross_entropy_masked(constant(z), {0}).v()(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
  const double wrong = cross_entropy_masked(constant(z), {1}).v()(0, 0);
  CHECK(wrong == doctest::Approx(1000.0).epsilon(1e-9));
  CHECK(std::isfinite(wrong));
}

TEST_CASE("cross entropy rejects malformed inputs") {
  const MatD empty = MatD::Zero(0, 4);
  const MatD two = MatD::Zero(2, 4);
  CHECK_THROWS_AS(cross_entropy_masked(constant(empty), {}), ContractError);
  CHECK_THROWS_AS(cross_entropy_masked(constant(two), {0}), ShapeError);
  CHECK_THROWS_AS(cross_entropy_masked(constant(two), {0, 4}), ContractError);
  CHECK_THROWS_AS(cross_entropy_masked(constant(two), {0, -1}), ContractError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(5);
  MatD z(4, 3);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();
  std::vector<int> targets = {1, 0, 2, 1};
  const double err = ticl_test::max_grad_err(
      [&](TapeD& tape, const std::vector<VarD>& in) {
        return cross_entropy_masked(in[0], targets);
      },
      {z});
  CHECK(err < 1e-6);
}

TEST_CASE("optimizer leaves parameters alone with zero gradient and zero decay") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  PfnModelD before = model;
  std::map<std::string, MatD> grads;
  for (const auto& [name, p] : model.params) grads.emplace(name, MatD::Zero(p.rows(), p.cols()));
  AdamState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  optimizer_step(model, grads, st, cfg);
  CHECK(max_param_diff(model, before) == 0.0);
  CHECK(st.t == 1);
}

TEST_CASE("first optimizer step moves each coordinate by about the learning rate") {
  PfnModelD model;
  model.cfg = tiny_model(Backbone::kAttention);
  model.params.emplace("w", MatD::Zero(2, 2));
  std::map<std::string, MatD> grads;
  grads.emplace("w", MatD::Constant(2, 2, 0.5));
  AdamState st;
  AdamWConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 0;
  optimizer_step(model, grads, st, cfg);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j)
      CHECK(model.params.at("w")(i, j) == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));
}

TEST_CASE("weight decay alone shrinks parameters by 1 - lr*wd") {
  PfnModelD model;
  model.cfg = tiny_model(Backbone::kAttention);
  MatD w(2, 2);
  w << 1.0, -2.0, 0.5, 4.0;
  model.params.emplace("w", w);
  std::map<std::string, MatD> grads;
  grads.emplace("w", MatD::Zero(2, 2));
  AdamState st;
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  optimizer_step(model, grads, st, cfg);
  const double factor = 1.0 - cfg.learning_rate * cfg.weight_decay;
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j)
      CHECK(ticl_test::rel_err(model.params.at("w")(i, j), w(i, j) * factor) < 1e-12);
}

TEST_CASE("optimizer matches a scalar reference over several steps") {
  // Independent re-derivation of AdamW with plain scalar arithmetic.
  PfnModelD model;
  model.cfg = tiny_model(Backbone::kAttention);
  MatD w(1, 3);
  w << 0.4, -1.2, 2.5;
  model.params.emplace("w", w);

  AdamWConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.weight_decay = 0.05;

  std::vector<double> m(3, 0.0), v(3, 0.0), ref = {0.4, -1.2, 2.5};
  AdamState st;
  Rng rng(3);
  for (int t = 1; t <= 5; ++t) {
    MatD g(1, 3);
    for (int j = 0; j < 3; ++j) g(0, j) = rng.normal();
    std::map<std::string, MatD> grads;
    grads.emplace("w", g);
    optimizer_step(model, grads, st, cfg);
    for (int j = 0; j < 3; ++j) {
      m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * g(0, j);
      v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * g(0, j) * g(0, j);
      const double mhat = m[j] / (1 - std::pow(cfg.beta1, t));
      const double vhat = v[j] / (1 - std::pow(cfg.beta2, t));
      ref[j] -= cfg.learning_rate * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * ref[j]);
    }
  }
  for (int j = 0; j < 3; ++j)
    CHECK(ticl_test::rel_err(model.params.at("w")(0, j), ref[j]) < 1e-12);
}

TEST_CASE("optimizer aborts on a NaN gradient and names the parameter") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  std::map<std::string, MatD> grads;
  for (const auto& [name, p] : model.params) grads.emplace(name, MatD::Zero(p.rows(), p.cols()));
  grads.at("head.w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  CHECK_THROWS_WITH_AS(optimizer_step(model, grads, st, AdamWConfig{}),
                       doctest::Contains("head.w"), DivergenceError);
}

TEST_CASE("optimizer rejects missing or misshapen gradients") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  std::map<std::string, MatD> grads;
  AdamState st;
  CHECK_THROWS_AS(optimizer_step(model, grads, st, AdamWConfig{}), ContractError);
  for (const auto& [name, p] : model.params) grads.emplace(name, MatD::Zero(p.rows(), p.cols()));
  grads.at("head.b") = MatD::Zero(2, 2);
  CHECK_THROWS_AS(optimizer_step(model, grads, st, AdamWConfig{}), ShapeError);
}

TEST_CASE("k micro-batches update the model like one batch of size k*b") {
  const PriorConfig prior = tiny_prior();
  std::vector<PfnModelD> results;
  for (auto [agg, batch] : std::vector<std::pair<int, int>>{{1, 4}, {2, 2}, {4, 1}}) {
    TrainConfig tc;
    tc.aggregate = agg;
    tc.batch_size = batch;
    tc.steps_per_epoch = 1;
    tc.epochs = 1;
    tc.val_tasks = 0;
    tc.learning_rate = 1e-3;
    tc.seed = 42;
    results.push_back(
        meta_train(init_model(tiny_model(Backbone::kUnidirectional)), prior, tc).model);
  }
  CHECK(max_param_diff(results[0], results[1]) < 1e-10);
  CHECK(max_param_diff(results[0], results[2]) < 1e-10);
}

TEST_CASE("a zero learning rate leaves the model untouched") {
  const PfnModelD init = init_model(tiny_model(Backbone::kAttention));
  TrainConfig tc;
  tc.learning_rate = 0;
  tc.weight_decay = 0;
  tc.batch_size = 2;
  tc.steps_per_epoch = 2;
  tc.epochs = 1;
  tc.val_tasks = 0;
  TrainResult res = meta_train(init, tiny_prior(), tc);
  CHECK(max_param_diff(res.model, init) == 0.0);
}

TEST_CASE("identical seeds give bitwise-identical loss curves and weights") {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.steps_per_epoch = 3;
  tc.epochs = 2;
  tc.val_tasks = 4;
  tc.learning_rate = 1e-3;
  tc.seed = 9;
  const PriorConfig prior = tiny_prior();
  TrainResult a = meta_train(init_model(tiny_model(Backbone::kBidirectional)), prior, tc);
  TrainResult b = meta_train(init_model(tiny_model(Backbone::kBidirectional)), prior, tc);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].step == b.curve[i].step);
    CHECK(std::memcmp(&a.curve[i].loss, &b.curve[i].loss, sizeof(double)) == 0);
  }
  CHECK(max_param_diff(a.model, b.model) == 0.0);
}

TEST_CASE("training reduces the loss for every backbone") {
  for (Backbone b :
       {Backbone::kAttention, Backbone::kUnidirectional, Backbone::kBidirectional}) {
    CAPTURE(backbone_name(b));
    TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.batch_size = 4;
    tc.steps_per_epoch = 20;
    tc.epochs = 5;
    tc.val_tasks = 0;
    tc.seed = 1;
    TrainResult res = meta_train(init_model(tiny_model(b)), tiny_prior(), tc);
    REQUIRE(res.curve.size() == 100);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
      head += res.curve[static_cast<std::size_t>(i)].loss;
      tail += res.curve[res.curve.size() - 1 - static_cast<std::size_t>(i)].loss;
    }
    CHECK(tail < head);
  }
}

TEST_CASE("validation tracks the best model and writes its checkpoint") {
  const std::string path = temp_path("ticl_best.ckpt");
  fs::remove(path);
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.batch_size = 4;
  tc.steps_per_epoch = 10;
  tc.epochs = 3;
  tc.val_tasks = 6;
  tc.checkpoint_path = path;
  tc.seed = 4;
  TrainResult res = meta_train(init_model(tiny_model(Backbone::kAttention)), tiny_prior(), tc);

  CHECK(res.best_val_accuracy >= 0.0);
  CHECK(res.best_val_accuracy <= 1.0);
  int validated = 0;
  for (const LossPoint& p : res.curve) validated += !std::isnan(p.val_accuracy);
  CHECK(validated == tc.epochs);

  REQUIRE(fs::exists(path));
  CHECK_FALSE(fs::exists(path + ".tmp"));
  Checkpoint ckpt = load_checkpoint(path);
  CHECK(max_param_diff(ckpt.model, res.best_model) == 0.0);
  // The best epoch's validation accuracy must be reproducible from the
  // checkpointed weights and the same validation seed stream.
  const auto val_set = sample_batch(tiny_prior(), sub_seed(tc.seed, 0), tc.val_tasks);
  CHECK(eval_accuracy(ckpt.model, val_set) == doctest::Approx(res.best_val_accuracy));
  fs::remove(path);
}

TEST_CASE("runaway loss trips the divergence guard") {
  TrainConfig tc;
  tc.learning_rate = 3.0;
  tc.weight_decay = 0;
  tc.batch_size = 2;
  tc.steps_per_epoch = 4;
  tc.epochs = 8;
  tc.val_tasks = 0;
  tc.seed = 2;
  CHECK_THROWS_WITH_AS(
      meta_train(init_model(tiny_model(Backbone::kAttention)), tiny_prior(), tc),
      doctest::Contains("3 consecutive epochs"), DivergenceError);
}

TEST_CASE("training rejects a prior wider than the model") {
  PriorConfig prior = tiny_prior();
  prior.max_features = 9;
  TrainConfig tc;
  tc.val_tasks = 0;
  CHECK_THROWS_AS(meta_train(init_model(tiny_model(Backbone::kAttention)), prior, tc),
                  ConfigError);
}

TEST_CASE("loss curve CSV has the expected shape") {
  std::vector<LossPoint> curve;
  curve.push_back(LossPoint{1, 1.25});
  curve.push_back(LossPoint{2, 1.125, 0.625});
  const std::string path = temp_path("ticl_curve.csv");
  write_loss_curve(path, curve);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "step,loss,val_accuracy");
  std::getline(is, line);
  CHECK(line == "1,1.25,");
  std::getline(is, line);
  CHECK(line == "2,1.125,0.625");
  CHECK_FALSE(std::getline(is, line));
  fs::remove(path);
}

TEST_CASE("checkpoints round-trip bitwise, optimizer state included") {
  PfnModelD model = init_model(tiny_model(Backbone::kUnidirectional));
  // Exercise exact bit patterns that naive text serialization would mangle.
  model.params.at("head.b")(0, 0) = -0.0;
  model.params.at("head.b")(0, 1) = 5e-324;

  AdamState st;
  AdamWConfig ocfg;
  Rng rng(8);
  for (int t = 0; t < 2; ++t) {
    std::map<std::string, MatD> grads;
    for (const auto& [name, p] : model.params) {
      MatD g(p.rows(), p.cols());
      for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
      grads.emplace(name, std::move(g));
    }
    optimizer_step(model, grads, st, ocfg);
  }

  Checkpoint out{model, 17, 99, true, st};
  const std::string path = temp_path("ticl_roundtrip.ckpt");
  save_checkpoint(out, path);
  CHECK_FALSE(fs::exists(path + ".tmp"));

  Checkpoint in = load_checkpoint(path);
  CHECK(in.step == 17);
  CHECK(in.master_seed == 99);
  CHECK(in.has_optimizer);
  CHECK(in.opt.t == st.t);
  CHECK(in.model.cfg.backbone == model.cfg.backbone);
  CHECK(in.model.cfg.embed_dim == model.cfg.embed_dim);
  CHECK(in.model.cfg.seed == model.cfg.seed);
  REQUIRE(in.model.params.size() == model.params.size());
  for (const auto& [name, p] : model.params) {
    CHECK(std::memcmp(in.model.params.at(name).data(), p.data(),
                      sizeof(double) * static_cast<std::size_t>(p.size())) == 0);
    CHECK(std::memcmp(in.opt.m.at(name).data(), st.m.at(name).data(),
                      sizeof(double) * static_cast<std::size_t>(p.size())) == 0);
    CHECK(std::memcmp(in.opt.v.at(name).data(), st.v.at(name).data(),
                      sizeof(double) * static_cast<std::size_t>(p.size())) == 0);
  }

  // Same inputs through the reloaded weights give bitwise-identical logits.
  TabularTask task = sample_task(tiny_prior(), 33);
  VarD before = pfn_forward(bind_params(model), task.context_X(), task.context_y(), task.query_X());
  VarD after =
      pfn_forward(bind_params(in.model), task.context_X(), task.context_y(), task.query_X());
  CHECK(std::memcmp(before.v().data(), after.v().data(),
                    sizeof(double) * static_cast<std::size_t>(before.v().size())) == 0);
  fs::remove(path);
}

TEST_CASE("a checkpoint without optimizer state loads without one") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  const std::string path = temp_path("ticl_noopt.ckpt");
  save_checkpoint(Checkpoint{model, 3, 5, false, {}}, path);
  Checkpoint in = load_checkpoint(path);
  CHECK_FALSE(in.has_optimizer);
  CHECK(in.opt.m.empty());
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are refused with explicit errors") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  const std::string path = temp_path("ticl_corrupt.ckpt");
  save_checkpoint(Checkpoint{model, 1, 2, false, {}}, path);
  const auto full_size = fs::file_size(path);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(temp_path("ticl_nonexistent.ckpt")), IoError);
  }
  SUBCASE("truncated file") {
    fs::resize_file(path, full_size - 5);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), IoError);
  }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.put('X');
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), IoError);
  }
  SUBCASE("unknown version") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(8);
    f.put(static_cast<char>(kCheckpointVersion + 1));
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), IoError);
  }
  SUBCASE("trailing bytes") {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.put('\0');
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"), IoError);
  }
  fs::remove(path);
}

TEST_CASE("loading against a mismatched run config is a config error") {
  PfnModelD model = init_model(tiny_model(Backbone::kAttention));
  const std::string path = temp_path("ticl_mismatch.ckpt");
  save_checkpoint(Checkpoint{model, 1, 2, false, {}}, path);

  ModelConfig expect = tiny_model(Backbone::kAttention);
  CHECK_NOTHROW(load_checkpoint(path, &expect));
  expect.embed_dim = 32;
  CHECK_THROWS_WITH_AS(load_checkpoint(path, &expect), doctest::Contains("embed_dim"),
                       ConfigError);
  ModelConfig other = tiny_model(Backbone::kUnidirectional);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, &other), doctest::Contains("backbone"), ConfigError);
  fs::remove(path);
}
