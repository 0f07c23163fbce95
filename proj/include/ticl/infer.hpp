#pragma once

// Tape-free prediction: labeled context plus masked queries through one
// forward pass, softmaxed per query row. Repeated context permutation (RCP)
// reruns that pass over r shuffled copies of the context and averages the
// probability vectors.

#include <cstdint>
#include <utility>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/model.hpp"
#include "ticl/rng.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

struct RcpConfig {
  int r = 8;  // permutation passes to average
  std::uint64_t seed = 0;

  void validate() const {
    if (r < 1) throw ConfigError("RcpConfig: r must be >= 1");
  }
};

// Each row is one query's per-class probability distribution (entries >= 0,
// summing to 1 up to rounding), one column per model class slot.
using Distributions = MatD;

// Mean of equally-shaped matrices by pairwise (tree) summation, so the result
// is insensitive to the order terms arrive in down to reassociation rounding.
inline MatD pairwise_mean(std::vector<MatD> parts) {
  if (parts.empty()) throw ContractError("pairwise_mean: no inputs");
  const auto n = static_cast<double>(parts.size());
  for (std::size_t i = 1; i < parts.size(); ++i)
    if (parts[i].rows() != parts[0].rows() || parts[i].cols() != parts[0].cols())
      throw ShapeError("pairwise_mean: shape mismatch " + shape_str(parts[i]) + " vs " +
                       shape_str(parts[0]));
  while (parts.size() > 1) {
    std::vector<MatD> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(parts[i] + parts[i + 1]);
    if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
    parts = std::move(next);
  }
  return parts[0] / n;
}

namespace detail {

inline MatD softmax_rows(const MatD& z) {
  MatD p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    Eigen::Array<double, 1, Eigen::Dynamic> e = (z.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

}  // namespace detail

// One forward pass over context plus queries; returns softmax probabilities
// for the query rows. With `one_by_one` set, each query instead gets its own
// forward pass against the same context — slower, but a useful parity check
// against the joint pass, which lets queries coexist as masked tokens.
inline Distributions predict(const PfnModelD& model, const MatD& Xctx,
                             const std::vector<int>& y_ctx, const MatD& Xq,
                             bool one_by_one = false) {
  if (Xq.rows() == 0) return MatD(0, model.cfg.max_classes);
  auto bound = bind_params(model);
  if (!one_by_one) {
    VarD logits = pfn_forward(bound, Xctx, y_ctx, Xq);
    return detail::softmax_rows(logits.v());
  }
  MatD out(Xq.rows(), model.cfg.max_classes);
  for (Eigen::Index i = 0; i < Xq.rows(); ++i) {
    const MatD one = Xq.row(i);
    VarD logits = pfn_forward(bound, Xctx, y_ctx, one);
    out.row(i) = detail::softmax_rows(logits.v());
  }
  return out;
}

// Uniform random permutation of context rows, labels kept aligned.
inline std::pair<MatD, std::vector<int>> shuffle_context(Rng& rng, const MatD& X,
                                                         const std::vector<int>& y) {
  if (static_cast<std::size_t>(X.rows()) != y.size())
    throw ShapeError("shuffle_context: " + std::to_string(y.size()) + " labels for " +
                     std::to_string(X.rows()) + " rows");
  const std::vector<int> perm = rng.permutation(static_cast<int>(X.rows()));
  MatD Xp(X.rows(), X.cols());
  std::vector<int> yp(y.size());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Xp.row(i) = X.row(perm[static_cast<std::size_t>(i)]);
    yp[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  return {std::move(Xp), std::move(yp)};
}

// Predicts r times, each against an independently shuffled context, and
// averages the probability vectors. Permutation k draws its shuffle from
// sub_seed(cfg.seed, k), so passes are reproducible and independent of one
// another — and could in principle run concurrently against the shared
// immutable model.
inline Distributions rcp_predict(const PfnModelD& model, const MatD& Xctx,
                                 const std::vector<int>& y_ctx, const MatD& Xq,
                                 const RcpConfig& cfg, bool one_by_one = false) {
  cfg.validate();
  std::vector<MatD> passes;
  passes.reserve(static_cast<std::size_t>(cfg.r));
  for (int k = 0; k < cfg.r; ++k) {
    Rng rng(sub_seed(cfg.seed, static_cast<std::uint64_t>(k)));
    auto [Xp, yp] = shuffle_context(rng, Xctx, y_ctx);
    passes.push_back(predict(model, Xp, yp, Xq, one_by_one));
  }
  return pairwise_mean(std::move(passes));
}

}  // namespace ticl
