#pragma once

// Finite-difference gradient checking. `build` is called with a tape and the
// parameters registered on it and must return a scalar loss; it gets invoked
// repeatedly on perturbed copies, so it has to be a pure function of the
// parameter values.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ticl/tensor.hpp"

namespace ticl_test {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// Worst guarded relative error between tape gradients and central differences.
// With max_checks_per_param > 0, entries are subsampled at a uniform stride so
// big parameter blocks stay affordable.
template <class BuildLoss>
double max_grad_err(BuildLoss&& build, const std::vector<ticl::MatD>& inits,
                    double step = 1e-5, int max_checks_per_param = 0) {
  ticl::TapeD tape;
  std::vector<ticl::VarD> ps;
  ps.reserve(inits.size());
  for (const auto& m : inits) ps.push_back(tape.param(m));
  ticl::VarD loss = build(tape, ps);
  tape.backward(loss);
  std::vector<ticl::MatD> analytic;
  analytic.reserve(ps.size());
  for (const auto& p : ps) analytic.push_back(tape.grad(p));

  auto eval = [&](const std::vector<ticl::MatD>& vals) {
    ticl::TapeD t2;
    std::vector<ticl::VarD> qs;
    qs.reserve(vals.size());
    for (const auto& m : vals) qs.push_back(t2.param(m));
    return build(t2, qs).v()(0, 0);
  };

  double worst = 0.0;
  for (size_t k = 0; k < inits.size(); ++k) {
    const Eigen::Index n = inits[k].size();
    Eigen::Index stride = 1;
    if (max_checks_per_param > 0 && n > max_checks_per_param)
      stride = (n + max_checks_per_param - 1) / max_checks_per_param;
    for (Eigen::Index e = 0; e < n; e += stride) {
      const Eigen::Index i = e / inits[k].cols(), j = e % inits[k].cols();
      std::vector<ticl::MatD> vals = inits;
      vals[k](i, j) = inits[k](i, j) + step;
      const double fp = eval(vals);
      vals[k](i, j) = inits[k](i, j) - step;
      const double fm = eval(vals);
      const double fd = (fp - fm) / (2.0 * step);
      worst = std::max(worst, rel_err(analytic[k](i, j), fd));
    }
  }
  return worst;
}

}  // namespace ticl_test
