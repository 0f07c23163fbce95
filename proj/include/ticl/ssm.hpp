#pragma once

// Sequence mixing via linear state recurrences.
//
// The scan runs the per-channel recurrence
//     h_t = decay[t,c] * h_{t-1} + input[t,:] * x[t,c],   h_{-1} = 0
//     y[t,c] = <output[t,:], h_t> + skip[c] * x[t,c]
// with a scalar decay per (position, channel) and state vectors of dimension
// n shared across channels. materialize_* build the equivalent dense L x L
// mixer per channel; they are O(L^2) test oracles, capped at kOracleCap rows,
// not a production path.

#include <memory>
#include <vector>

#include "ticl/tensor.hpp"

namespace ticl {

inline constexpr Eigen::Index kOracleCap = 256;

// Discretized per-position scan parameters. `skip` may be left invalid, in
// which case the skip term is absent (the hydra composition requires that for
// its inner scans).
template <class S>
struct ScanParams {
  Var<S> decay;   // [L, d]
  Var<S> input;   // [L, n]
  Var<S> output;  // [L, n]
  Var<S> skip;    // [1, d] or invalid

  Eigen::Index seq_len() const { return decay.rows(); }
  Eigen::Index channels() const { return decay.cols(); }
  Eigen::Index state_dim() const { return input.cols(); }
};

// Dense per-channel mixer matrices.
template <class S>
using MixMatrix = std::vector<Mat<S>>;

namespace detail {

template <class S>
inline void check_scan_shapes(const Var<S>& x, const ScanParams<S>& p) {
  const Eigen::Index L = x.rows(), d = x.cols();
  if (p.decay.rows() != L || p.decay.cols() != d)
    throw ShapeError("selective_scan: decay " + shape_str(p.decay.v()) + " does not cover x " + shape_str(x.v()));
  if (p.input.rows() != L || p.output.rows() != L || p.input.cols() != p.output.cols())
    throw ShapeError("selective_scan: input/output maps " + shape_str(p.input.v()) + " vs " +
                     shape_str(p.output.v()) + " must be [L,n]");
  if (p.skip.valid() && (p.skip.rows() != 1 || p.skip.cols() != d))
    throw ShapeError("selective_scan: skip must be [1," + std::to_string(d) + "]");
}

}  // namespace detail

// Zero-order-hold discretization: decay = exp(delta * cont_decay) in (0,1),
// input = delta * input_raw. delta is one positive step size per position,
// cont_decay one negative rate per channel.
template <class S>
std::pair<Var<S>, Var<S>> discretize(const Var<S>& delta, const Var<S>& cont_decay,
                                     const Var<S>& input_raw) {
  if (delta.cols() != 1) throw ShapeError("discretize: delta must be [L,1]");
  if (cont_decay.rows() != 1) throw ShapeError("discretize: cont_decay must be [1,d]");
  if (input_raw.rows() != delta.rows()) throw ShapeError("discretize: input_raw rows must match delta");
  if ((delta.v().array() <= S(0)).any())
    throw ContractError("discretize: step sizes must be strictly positive");
  if ((cont_decay.v().array() >= S(0)).any())
    throw ContractError("discretize: continuous decay rates must be strictly negative");
  Var<S> decay = exp_elem(matmul(delta, cont_decay));
  Var<S> input = mul_colvec(input_raw, delta);
  return {decay, input};
}

// Sequential reference scan; O(L * n * d) and causal by construction.
template <class S>
Var<S> selective_scan(const Var<S>& x, const ScanParams<S>& p) {
  detail::check_scan_shapes(x, p);
  const Eigen::Index L = x.rows(), d = x.cols(), n = p.input.cols();
  Tape<S>* t = ticl::detail::active_tape<S>({&x, &p.decay, &p.input, &p.output, &p.skip});

  const Mat<S>& X = x.v();
  const Mat<S>& A = p.decay.v();
  const Mat<S>& B = p.input.v();
  const Mat<S>& C = p.output.v();

  Mat<S> y(L, d);
  Mat<S> h = Mat<S>::Zero(d, n);
  std::shared_ptr<Mat<S>> states;  // (L+1) x (d*n), row t = h_{t-1}; only kept when taping
  if (t) {
    states = std::make_shared<Mat<S>>(L + 1, d * n);
    states->row(0).setZero();
  }
  for (Eigen::Index i = 0; i < L; ++i) {
    h = (h.array().colwise() * A.row(i).transpose().array()).matrix();
    h.noalias() += X.row(i).transpose() * B.row(i);
    y.row(i).noalias() = (h * C.row(i).transpose()).transpose();
    if (t) states->row(i + 1) = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(h.data(), d * n);
  }
  if (p.skip.valid()) y.array() += X.array().rowwise() * p.skip.v().array().row(0);

  if (!t) return ticl::detail::emit<S>(t, std::move(y), {});

  int ix = x.node, ia = p.decay.node, ib = p.input.node, ic = p.output.node;
  int id = p.skip.valid() ? p.skip.node : -1;
  auto xp = x.vp, ap = p.decay.vp, bp = p.input.vp, cp = p.output.vp;
  auto dp = p.skip.valid() ? p.skip.vp : nullptr;
  return ticl::detail::emit<S>(
      t, std::move(y), [=](Tape<S>& tp, const Mat<S>& g) {
        const Mat<S>&X2 = *xp, &A2 = *ap, &B2 = *bp, &C2 = *cp;
        Mat<S> lam = Mat<S>::Zero(d, n);
        Mat<S> dx = Mat<S>::Zero(L, d), dA = Mat<S>(L, d), dB = Mat<S>(L, n), dC = Mat<S>(L, n);
        for (Eigen::Index i = L - 1; i >= 0; --i) {
          auto ht = Eigen::Map<const Mat<S>>(states->row(i + 1).data(), d, n);
          auto htm1 = Eigen::Map<const Mat<S>>(states->row(i).data(), d, n);
          lam.noalias() += g.row(i).transpose() * C2.row(i);
          dC.row(i).noalias() = g.row(i) * ht;
          dA.row(i) = lam.cwiseProduct(htm1).rowwise().sum().transpose();
          dx.row(i).noalias() = (lam * B2.row(i).transpose()).transpose();
          dB.row(i).noalias() = X2.row(i) * lam;
          lam = (lam.array().colwise() * A2.row(i).transpose().array()).matrix();
        }
        if (dp) {
          dx.array() += g.array().rowwise() * dp->array().row(0);
          if (id >= 0) tp.grad_acc(id) += g.cwiseProduct(X2).colwise().sum();
        }
        if (ix >= 0) tp.grad_acc(ix) += dx;
        if (ia >= 0) tp.grad_acc(ia) += dA;
        if (ib >= 0) tp.grad_acc(ib) += dB;
        if (ic >= 0) tp.grad_acc(ic) += dC;
      });
}

// Dense lower-triangular materialization of the scan, one L x L matrix per
// channel: M[i][j] = <C_i, (prod_{k=j+1..i} A_k) B_j> below the diagonal and
// <C_i, B_i> + skip on it.
template <class S>
MixMatrix<S> materialize_semiseparable(const Mat<S>& decay, const Mat<S>& input,
                                       const Mat<S>& output, const Mat<S>& skip = Mat<S>()) {
  const Eigen::Index L = decay.rows(), d = decay.cols(), n = input.cols();
  if (L > kOracleCap)
    throw ContractError("materialize_semiseparable: L=" + std::to_string(L) +
                        " exceeds oracle cap " + std::to_string(kOracleCap));
  if (input.rows() != L || output.rows() != L || output.cols() != n)
    throw ShapeError("materialize_semiseparable: bad input/output shapes");
  if (skip.size() > 0 && (skip.rows() != 1 || skip.cols() != d))
    throw ShapeError("materialize_semiseparable: skip must be [1,d]");
  MixMatrix<S> out(static_cast<size_t>(d));
  for (Eigen::Index c = 0; c < d; ++c) {
    Mat<S> m = Mat<S>::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i) {
      S prod = S(1);  // running prod_{k=j+1..i} A_k, built up as j descends
      m(i, i) = output.row(i).dot(input.row(i));
      if (skip.size() > 0) m(i, i) += skip(0, c);
      for (Eigen::Index j = i - 1; j >= 0; --j) {
        prod *= decay(j + 1, c);
        m(i, j) = prod * output.row(i).dot(input.row(j));
      }
    }
    out[static_cast<size_t>(c)] = std::move(m);
  }
  return out;
}

// Bidirectional quasiseparable composition. The forward branch sees strictly
// earlier positions, the backward branch strictly later ones, and the
// position itself enters only through diag_skip. `bwd` is consumed by the
// scan over the reversed sequence, i.e. bwd position 0 applies to the last
// token; both inner scans must carry no skip of their own.
template <class S>
Var<S> hydra_mix(const Var<S>& x, const ScanParams<S>& fwd, const ScanParams<S>& bwd,
                 const Var<S>& diag_skip) {
  if (fwd.skip.valid() || bwd.skip.valid())
    throw ContractError("hydra_mix: inner scans must not carry skip terms");
  if (!diag_skip.valid() || diag_skip.rows() != 1 || diag_skip.cols() != x.cols())
    throw ShapeError("hydra_mix: diag_skip must be [1," + std::to_string(x.cols()) + "]");
  Var<S> causal = shift_seq(selective_scan(x, fwd));
  Var<S> anticausal = flip_seq(shift_seq(selective_scan(flip_seq(x), bwd)));
  return add(add(causal, anticausal), mul_rowvec(x, diag_skip));
}

// Dense oracle for hydra_mix: strictly-lower part from the shifted forward
// semiseparable matrix, strictly-upper from the flip-conjugated shifted
// backward one, diag_skip on the diagonal.
template <class S>
MixMatrix<S> materialize_quasiseparable(const Mat<S>& fwd_decay, const Mat<S>& fwd_input,
                                        const Mat<S>& fwd_output, const Mat<S>& bwd_decay,
                                        const Mat<S>& bwd_input, const Mat<S>& bwd_output,
                                        const Mat<S>& diag_skip) {
  const Eigen::Index L = fwd_decay.rows(), d = fwd_decay.cols();
  if (L > kOracleCap)
    throw ContractError("materialize_quasiseparable: L=" + std::to_string(L) +
                        " exceeds oracle cap " + std::to_string(kOracleCap));
  if (diag_skip.rows() != 1 || diag_skip.cols() != d)
    throw ShapeError("materialize_quasiseparable: diag_skip must be [1,d]");
  MixMatrix<S> mf = materialize_semiseparable(fwd_decay, fwd_input, fwd_output);
  MixMatrix<S> mb = materialize_semiseparable(bwd_decay, bwd_input, bwd_output);
  MixMatrix<S> out(static_cast<size_t>(d));
  for (Eigen::Index c = 0; c < d; ++c) {
    Mat<S> m = Mat<S>::Zero(L, L);
    if (L > 1) {
      m.bottomRows(L - 1) = mf[static_cast<size_t>(c)].topRows(L - 1);
      Mat<S> shifted_b = Mat<S>::Zero(L, L);
      shifted_b.bottomRows(L - 1) = mb[static_cast<size_t>(c)].topRows(L - 1);
      m += shifted_b.colwise().reverse().rowwise().reverse();
    }
    m.diagonal().array() += diag_skip(0, c);
    out[static_cast<size_t>(c)] = std::move(m);
  }
  return out;
}

// Apply a per-channel mixer: y[:,c] = M_c * x[:,c]. Value-level helper for
// the oracle cross-checks.
template <class S>
Mat<S> apply_mix(const MixMatrix<S>& m, const Mat<S>& x) {
  if (static_cast<Eigen::Index>(m.size()) != x.cols())
    throw ShapeError("apply_mix: channel count mismatch");
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    y.col(c) = m[static_cast<size_t>(c)] * x.col(c);
  return y;
}

}  // namespace ticl
