#pragma once

// AdamW with decoupled weight decay. The optimizer state mirrors the model's
// parameter map name-for-name so it can be checkpointed alongside the weights.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ticl/errors.hpp"
#include "ticl/model.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (learning_rate < 0) throw ConfigError("AdamWConfig: learning_rate must be >= 0");
    if (beta1 < 0 || beta1 >= 1) throw ConfigError("AdamWConfig: beta1 must be in [0,1)");
    if (beta2 < 0 || beta2 >= 1) throw ConfigError("AdamWConfig: beta2 must be in [0,1)");
    if (eps <= 0) throw ConfigError("AdamWConfig: eps must be > 0");
    if (weight_decay < 0) throw ConfigError("AdamWConfig: weight_decay must be >= 0");
  }
};

// First and second moment estimates, keyed like PfnModel::params.
struct AdamState {
  std::uint64_t t = 0;
  std::map<std::string, MatD> m;
  std::map<std::string, MatD> v;
};

// One decoupled-weight-decay adaptive-moment update over every parameter.
// Moment buffers are created lazily on first use; `grads` must cover exactly
// the model's parameter names. Non-finite gradients abort: a NaN that enters
// the moment buffers would silently poison every later step.
inline void optimizer_step(PfnModelD& model, const std::map<std::string, MatD>& grads,
                           AdamState& state, const AdamWConfig& cfg) {
  cfg.validate();
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : model.params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("optimizer_step: no gradient for " + name);
    const MatD& g = git->second;
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("optimizer_step: gradient shape " + shape_str(g) + " for " + name +
                       " does not match parameter " + shape_str(p));
    if (!g.allFinite())
      throw DivergenceError("optimizer_step: non-finite gradient for " + name + " at step " +
                            std::to_string(state.t));
    MatD& m = state.m.try_emplace(name, MatD::Zero(p.rows(), p.cols())).first->second;
    MatD& v = state.v.try_emplace(name, MatD::Zero(p.rows(), p.cols())).first->second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * g.array().square();
    const MatD update =
        ((m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps) + cfg.weight_decay * p.array())
            .matrix();
    p -= cfg.learning_rate * update;
  }
}

}  // namespace ticl
