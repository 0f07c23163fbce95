#pragma once

// Meta-training loop: sample synthetic tasks, run the in-context forward
// pass, take the masked cross-entropy over query positions, and step AdamW.
// Gradients can be accumulated over several micro-batches so that k batches
// of size b update the model exactly like one batch of size k*b.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ticl/checkpoint.hpp"
#include "ticl/errors.hpp"
#include "ticl/model.hpp"
#include "ticl/optim.hpp"
#include "ticl/prior.hpp"
#include "ticl/rng.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

// Mean negative log softmax-probability of the target class, averaged over
// the rows of `logits` (one row per query). Fused into a single taped node:
// the max-shifted log-sum-exp keeps the value stable for saturated logits,
// and the pull is the classic (softmax - onehot) / Q.
template <class S>
Var<S> cross_entropy_masked(const Var<S>& logits, const std::vector<int>& targets) {
  const Eigen::Index q = logits.rows();
  const Eigen::Index c = logits.cols();
  if (q == 0) throw ContractError("cross_entropy_masked: empty query set");
  if (static_cast<Eigen::Index>(targets.size()) != q)
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(q) + " logit rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw ContractError("cross_entropy_masked: target " + std::to_string(t) +
                          " outside [0, " + std::to_string(c) + ")");

  auto probs = std::make_shared<Mat<S>>(q, c);
  S total = 0;
  for (Eigen::Index i = 0; i < q; ++i) {
    const S m = logits.v().row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.v().row(i).array() - m).exp();
    const S z = e.sum();
    probs->row(i) = (e / z).matrix();
    total += std::log(z) + m - logits.v()(i, targets[i]);
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(q);

  Tape<S>* t = detail::active_tape<S>({&logits});
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int il = logits.node;
  return detail::emit<S>(t, std::move(out),
                         [il, probs, targets, q](Tape<S>& tp, const Mat<S>& g) {
                           Mat<S> d = *probs;
                           for (Eigen::Index i = 0; i < q; ++i) d(i, targets[i]) -= S(1);
                           tp.grad_acc(il) += (g(0, 0) / static_cast<S>(q)) * d;
                         });
}

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int batch_size = 8;
  int aggregate = 1;  // micro-batches summed into each optimizer step
  int steps_per_epoch = 25;
  int epochs = 4;
  int val_tasks = 16;            // fresh prior tasks scored after every epoch
  std::string checkpoint_path;   // best-validation weights land here; empty skips writes
  std::uint64_t seed = 0;

  void validate() const {
    adamw().validate();
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (aggregate < 1) throw ConfigError("TrainConfig: aggregate must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("TrainConfig: steps_per_epoch must be >= 1");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (val_tasks < 0) throw ConfigError("TrainConfig: val_tasks must be >= 0");
  }

  AdamWConfig adamw() const {
    return AdamWConfig{learning_rate, beta1, beta2, eps, weight_decay};
  }
};

struct LossPoint {
  std::uint64_t step = 0;  // optimizer steps taken so far, 1-based
  double loss = 0;
  // Validation accuracy measured after this step; NaN on steps without one.
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  PfnModelD model;       // weights after the final step
  PfnModelD best_model;  // weights at the best validation accuracy seen
  double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::vector<LossPoint> curve;
};

// Fraction of query rows whose arg-max logit (over each task's own classes)
// matches the label. Ties break toward the lowest class index.
inline double eval_accuracy(const PfnModelD& model, const std::vector<TabularTask>& tasks) {
  auto bound = bind_params(model);
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const TabularTask& task : tasks) {
    VarD logits = pfn_forward(bound, task.context_X(), task.context_y(), task.query_X());
    const std::vector<int> truth = task.query_y();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      int arg = 0;
      for (int j = 1; j < task.num_classes; ++j)
        if (logits.v()(i, j) > logits.v()(i, arg)) arg = j;
      correct += (arg == truth[static_cast<std::size_t>(i)]);
      ++total;
    }
  }
  if (total == 0) throw ContractError("eval_accuracy: no query rows");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// Runs the full meta-training loop on synthetic tasks. Task seeds come from a
// global counter, so the stream of tasks depends only on `tc.seed` and not on
// how steps are split into micro-batches. Validation runs on a fixed task set
// after every epoch; the best-scoring weights are kept (and checkpointed when
// a path is configured). Divergence — epoch-mean loss above 10x the first
// step's loss for three consecutive epochs, or a non-finite loss — aborts.
inline TrainResult meta_train(PfnModelD model, const PriorConfig& prior, const TrainConfig& tc) {
  model.cfg.validate();
  prior.validate();
  tc.validate();
  if (prior.max_features > model.cfg.max_features)
    throw ConfigError("meta_train: prior draws up to " + std::to_string(prior.max_features) +
                      " features but the model caps at " + std::to_string(model.cfg.max_features));
  if (prior.max_classes > model.cfg.max_classes)
    throw ConfigError("meta_train: prior draws up to " + std::to_string(prior.max_classes) +
                      " classes but the model caps at " + std::to_string(model.cfg.max_classes));

  std::vector<TabularTask> val_set;
  if (tc.val_tasks > 0) val_set = sample_batch(prior, sub_seed(tc.seed, 0), tc.val_tasks);
  const std::uint64_t task_stream = sub_seed(tc.seed, 1);

  TrainResult res;
  AdamState opt;
  const AdamWConfig ow = tc.adamw();
  const double per_step_tasks = static_cast<double>(tc.aggregate) * tc.batch_size;

  std::uint64_t task_counter = 0;
  std::uint64_t step = 0;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  int high_loss_epochs = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double epoch_loss = 0;
    for (int s = 0; s < tc.steps_per_epoch; ++s) {
      std::map<std::string, MatD> grads;
      for (const auto& [name, p] : model.params)
        grads.emplace(name, MatD::Zero(p.rows(), p.cols()));
      double step_loss = 0;

      for (int micro = 0; micro < tc.aggregate; ++micro) {
        Tape<double> tape;
        auto bound = bind_params(model, &tape);
        VarD batch_loss;
        for (int b = 0; b < tc.batch_size; ++b) {
          TabularTask task = sample_task(prior, sub_seed(task_stream, task_counter++));
          VarD logits = pfn_forward(bound, task.context_X(), task.context_y(), task.query_X());
          VarD loss = cross_entropy_masked(logits, task.query_y());
          batch_loss = (b == 0) ? loss : add(batch_loss, loss);
        }
        VarD scaled = scale(batch_loss, 1.0 / per_step_tasks);
        const double lv = scaled.v()(0, 0);
        if (!std::isfinite(lv))
          throw DivergenceError("meta_train: non-finite loss at step " + std::to_string(step + 1));
        step_loss += lv;
        tape.backward(scaled);
        for (auto& [name, g] : grads) g += tape.grad(bound.p.at(name));
      }

      optimizer_step(model, grads, opt, ow);
      ++step;
      epoch_loss += step_loss;
      if (std::isnan(initial_loss)) initial_loss = step_loss;
      res.curve.push_back(LossPoint{step, step_loss});
    }

    if (tc.val_tasks > 0) {
      const double acc = eval_accuracy(model, val_set);
      res.curve.back().val_accuracy = acc;
      if (std::isnan(res.best_val_accuracy) || acc > res.best_val_accuracy) {
        res.best_val_accuracy = acc;
        res.best_model = model;
        if (!tc.checkpoint_path.empty())
          save_checkpoint(Checkpoint{model, step, tc.seed, false, {}}, tc.checkpoint_path);
      }
    }

    epoch_loss /= tc.steps_per_epoch;
    high_loss_epochs = (epoch_loss > 10.0 * initial_loss) ? high_loss_epochs + 1 : 0;
    if (high_loss_epochs >= 3)
      throw DivergenceError("meta_train: epoch-mean loss " + std::to_string(epoch_loss) +
                            " stayed above 10x the initial loss " + std::to_string(initial_loss) +
                            " for 3 consecutive epochs (epoch " + std::to_string(epoch + 1) + ")");
  }

  if (tc.val_tasks == 0) {
    res.best_model = model;
  }
  res.model = std::move(model);
  return res;
}

// Loss curve as CSV with columns (step, loss, val_accuracy); the accuracy
// cell is left empty on steps where validation did not run.
inline void write_loss_curve(const std::string& path, const std::vector<LossPoint>& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("write_loss_curve: cannot open " + path);
  os << "step,loss,val_accuracy\n";
  os << std::setprecision(17);
  for (const LossPoint& p : curve) {
    os << p.step << ',' << p.loss << ',';
    if (!std::isnan(p.val_accuracy)) os << p.val_accuracy;
    os << '\n';
  }
  if (!os) throw IoError("write_loss_curve: write to " + path + " failed");
}

}  // namespace ticl
