#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation.
//
// Values are Eigen row-major matrices of a caller-chosen scalar (double is the
// correctness substrate; float exists for the benchmark path). A Var is a
// cheap handle: a shared pointer to an immutable value plus an optional node
// id on a Tape. Operations are free functions; an op whose inputs are all
// unrecorded produces an unrecorded result, so inference runs tape-free and
// intermediate values die as soon as the last handle does.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ticl/errors.hpp"

namespace ticl {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatD = Mat<double>;
using MatF = Mat<float>;

template <class S>
inline std::string shape_str(const Mat<S>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

template <class S>
inline bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

template <class S>
class Tape;

template <class S>
struct Var {
  std::shared_ptr<const Mat<S>> vp;
  int node = -1;
  Tape<S>* tape = nullptr;

  Var() = default;
  Var(std::shared_ptr<const Mat<S>> v, int id, Tape<S>* t) : vp(std::move(v)), node(id), tape(t) {}

  const Mat<S>& v() const { return *vp; }
  bool valid() const { return static_cast<bool>(vp); }
  bool recorded() const { return node >= 0; }
  Eigen::Index rows() const { return vp->rows(); }
  Eigen::Index cols() const { return vp->cols(); }
};

using VarD = Var<double>;

// Ordered record of primitive operations. Nodes are appended in execution
// order with inputs preceding outputs, so walking the record backwards visits
// the graph in reverse topological order exactly once.
template <class S>
class Tape {
 public:
  using Pull = std::function<void(Tape&, const Mat<S>&)>;

  Var<S> param(Mat<S> value) {
    return record(std::make_shared<const Mat<S>>(std::move(value)), Pull{});
  }

  Var<S> record(std::shared_ptr<const Mat<S>> value, Pull pull) {
    nodes_.push_back(NodeRec{std::move(value), std::move(pull)});
    return Var<S>{nodes_.back().value, static_cast<int>(nodes_.size()) - 1, this};
  }

  void backward(const Var<S>& loss) {
    if (!loss.valid() || loss.tape != this || !loss.recorded())
      throw ContractError("backward: loss is not recorded on this tape");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.v()));
    if (!std::isfinite(static_cast<double>(loss.v()(0, 0))))
      throw ContractError("backward: loss is not finite");
    grads_.assign(nodes_.size(), Mat<S>());
    grads_[loss.node] = Mat<S>::Ones(1, 1);
    for (int i = loss.node; i >= 0; --i) {
      if (grads_[i].size() > 0 && nodes_[i].pull) nodes_[i].pull(*this, grads_[i]);
    }
  }

  // Zero-initialized accumulator for node id; sized on first touch.
  Mat<S>& grad_acc(int id) {
    Mat<S>& g = grads_[id];
    if (g.size() == 0) g = Mat<S>::Zero(nodes_[id].value->rows(), nodes_[id].value->cols());
    return g;
  }

  // Gradient of a recorded var after backward(); zero matrix if untouched.
  Mat<S> grad(const Var<S>& v) const {
    if (!v.recorded() || v.tape != this) throw ContractError("grad: var not on this tape");
    if (grads_.empty()) throw ContractError("grad: backward has not run");
    const Mat<S>& g = grads_[v.node];
    if (g.size() == 0) return Mat<S>::Zero(v.rows(), v.cols());
    return g;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct NodeRec {
    std::shared_ptr<const Mat<S>> value;
    Pull pull;
  };
  std::vector<NodeRec> nodes_;
  std::vector<Mat<S>> grads_;
};

using TapeD = Tape<double>;

template <class S>
inline Var<S> constant(Mat<S> value) {
  return Var<S>{std::make_shared<const Mat<S>>(std::move(value)), -1, nullptr};
}

template <class S>
inline Var<S> constant_scalar(S value) {
  Mat<S> m(1, 1);
  m(0, 0) = value;
  return constant<S>(std::move(m));
}

namespace detail {

template <class S>
inline Tape<S>* active_tape(std::initializer_list<const Var<S>*> vars) {
  Tape<S>* t = nullptr;
  for (const Var<S>* v : vars) {
    if (!v->recorded()) continue;
    if (t && t != v->tape) throw ContractError("operands recorded on different tapes");
    t = v->tape;
  }
  return t;
}

template <class S>
inline Var<S> emit(Tape<S>* t, Mat<S>&& value, typename Tape<S>::Pull&& pull) {
  auto vp = std::make_shared<const Mat<S>>(std::move(value));
  if (!t) return Var<S>{vp, -1, nullptr};
  return t->record(vp, std::move(pull));
}

template <class S>
inline void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.v()) + " vs " + shape_str(b.v()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tape<S>* t = detail::active_tape<S>({&a, &b});
  Mat<S> out = a.v() + b.v();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node, ib = b.node;
  return detail::emit<S>(t, std::move(out), [ia, ib](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia) += g;
    if (ib >= 0) tp.grad_acc(ib) += g;
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tape<S>* t = detail::active_tape<S>({&a, &b});
  Mat<S> out = a.v() - b.v();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node, ib = b.node;
  return detail::emit<S>(t, std::move(out), [ia, ib](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia) += g;
    if (ib >= 0) tp.grad_acc(ib) -= g;
  });
}

// Hadamard product.
template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tape<S>* t = detail::active_tape<S>({&a, &b});
  Mat<S> out = a.v().cwiseProduct(b.v());
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node, ib = b.node;
  auto ap = a.vp, bp = b.vp;
  return detail::emit<S>(t, std::move(out), [ia, ib, ap, bp](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia) += g.cwiseProduct(*bp);
    if (ib >= 0) tp.grad_acc(ib) += g.cwiseProduct(*ap);
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
  Tape<S>* t = detail::active_tape<S>({&a});
  Mat<S> out = a.v() * c;
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node;
  return detail::emit<S>(t, std::move(out), [ia, c](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia) += g * c;
  });
}

template <class S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <class S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.v()) + " * " + shape_str(b.v()));
  Tape<S>* t = detail::active_tape<S>({&a, &b});
  Mat<S> out = a.v() * b.v();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node, ib = b.node;
  auto ap = a.vp, bp = b.vp;
  return detail::emit<S>(t, std::move(out), [ia, ib, ap, bp](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia).noalias() += g * bp->transpose();
    if (ib >= 0) tp.grad_acc(ib).noalias() += ap->transpose() * g;
  });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  Tape<S>* t = detail::active_tape<S>({&a});
  Mat<S> out = a.v().transpose();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ia = a.node;
  return detail::emit<S>(t, std::move(out), [ia](Tape<S>& tp, const Mat<S>& g) {
    if (ia >= 0) tp.grad_acc(ia) += g.transpose();
  });
}

// ---------------------------------------------------------------------------
// broadcast helpers (the only broadcasting the blocks need)

// x[L,d] + b[1,d]
template <class S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& b) {
  if (b.rows() != 1 || b.cols() != x.cols())
    throw ShapeError("add_rowvec: " + shape_str(x.v()) + " vs " + shape_str(b.v()));
  Tape<S>* t = detail::active_tape<S>({&x, &b});
  Mat<S> out = x.v();
  out.rowwise() += b.v().row(0);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node, ib = b.node;
  return detail::emit<S>(t, std::move(out), [ix, ib](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += g;
    if (ib >= 0) tp.grad_acc(ib) += g.colwise().sum();
  });
}

// x[L,d] .* v[1,d]
template <class S>
Var<S> mul_rowvec(const Var<S>& x, const Var<S>& v) {
  if (v.rows() != 1 || v.cols() != x.cols())
    throw ShapeError("mul_rowvec: " + shape_str(x.v()) + " vs " + shape_str(v.v()));
  Tape<S>* t = detail::active_tape<S>({&x, &v});
  Mat<S> out = x.v().array().rowwise() * v.v().array().row(0);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node, iv = v.node;
  auto xp = x.vp, vp2 = v.vp;
  return detail::emit<S>(t, std::move(out), [ix, iv, xp, vp2](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += (g.array().rowwise() * vp2->array().row(0)).matrix();
    if (iv >= 0) tp.grad_acc(iv) += g.cwiseProduct(*xp).colwise().sum();
  });
}

// x[L,d] .* s[L,1]
template <class S>
Var<S> mul_colvec(const Var<S>& x, const Var<S>& s) {
  if (s.cols() != 1 || s.rows() != x.rows())
    throw ShapeError("mul_colvec: " + shape_str(x.v()) + " vs " + shape_str(s.v()));
  Tape<S>* t = detail::active_tape<S>({&x, &s});
  Mat<S> out = x.v().array().colwise() * s.v().array().col(0);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node, is = s.node;
  auto xp = x.vp, sp = s.vp;
  return detail::emit<S>(t, std::move(out), [ix, is, xp, sp](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += (g.array().colwise() * sp->array().col(0)).matrix();
    if (is >= 0) tp.grad_acc(is) += g.cwiseProduct(*xp).rowwise().sum();
  });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

template <class S>
Var<S> exp_elem(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = x.v().array().exp();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto op = std::make_shared<Mat<S>>(out);
  return detail::emit<S>(t, std::move(out), [ix, op](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += g.cwiseProduct(*op);
  });
}

template <class S>
inline Mat<S> sigmoid_value(const Mat<S>& x) {
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = sigmoid_value(x.v());
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto op = std::make_shared<Mat<S>>(out);
  return detail::emit<S>(t, std::move(out), [ix, op](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0)
      tp.grad_acc(ix) += g.cwiseProduct((op->array() * (S(1) - op->array())).matrix());
  });
}

// x * sigmoid(x)
template <class S>
Var<S> silu(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> sg = sigmoid_value(x.v());
  Mat<S> out = x.v().cwiseProduct(sg);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto xp = x.vp;
  auto sp = std::make_shared<Mat<S>>(std::move(sg));
  return detail::emit<S>(t, std::move(out), [ix, xp, sp](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) {
      auto s = sp->array();
      tp.grad_acc(ix) += g.cwiseProduct(((s + xp->array() * s * (S(1) - s))).matrix());
    }
  });
}

// Exact gelu: 0.5 x (1 + erf(x / sqrt(2)))
template <class S>
Var<S> gelu(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> phi = x.v().unaryExpr([](S v) { return S(std::erf(static_cast<double>(v) * 0.7071067811865475244)); });
  Mat<S> out = (x.v().array() * S(0.5) * (S(1) + phi.array())).matrix();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto xp = x.vp;
  auto pp = std::make_shared<Mat<S>>(std::move(phi));
  return detail::emit<S>(t, std::move(out), [ix, xp, pp](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) {
      const S inv_sqrt2pi = S(0.3989422804014326779L);
      auto xa = xp->array();
      auto d = S(0.5) * (S(1) + pp->array()) + xa * inv_sqrt2pi * (-xa.square() * S(0.5)).exp();
      tp.grad_acc(ix) += g.cwiseProduct(d.matrix());
    }
  });
}

// log(1 + exp(x)), overflow-safe
template <class S>
Var<S> softplus(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = x.v().unaryExpr([](S v) {
    double d = static_cast<double>(v);
    return S(std::max(d, 0.0) + std::log1p(std::exp(-std::abs(d))));
  });
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto xp = x.vp;
  return detail::emit<S>(t, std::move(out), [ix, xp](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += g.cwiseProduct(sigmoid_value(*xp));
  });
}

// ---------------------------------------------------------------------------
// softmax / layer norm

// Max-subtracted softmax along axis (1 = within each row, 0 = within each column).
template <class S>
Var<S> softmax(const Var<S>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out;
  if (axis == 1) {
    out = (x.v().array().colwise() - x.v().rowwise().maxCoeff().array()).exp();
    Mat<S> z = out.rowwise().sum();
    out.array().colwise() /= z.array().col(0);
  } else {
    out = (x.v().array().rowwise() - x.v().colwise().maxCoeff().array()).exp();
    Mat<S> z = out.colwise().sum();
    out.array().rowwise() /= z.array().row(0);
  }
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  auto op = std::make_shared<Mat<S>>(out);
  return detail::emit<S>(t, std::move(out), [ix, op, axis](Tape<S>& tp, const Mat<S>& g) {
    if (ix < 0) return;
    const Mat<S>& y = *op;
    Mat<S> gy = g.cwiseProduct(y);
    if (axis == 1) {
      Mat<S> dot = gy.rowwise().sum();  // [L,1]
      tp.grad_acc(ix) += gy - (y.array().colwise() * dot.array().col(0)).matrix();
    } else {
      Mat<S> dot = gy.colwise().sum();  // [1,d]
      tp.grad_acc(ix) += gy - (y.array().rowwise() * dot.array().row(0)).matrix();
    }
  });
}

// Per-row normalization: (x - mean) / sqrt(var + eps), then gain & bias.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  if (x.cols() < 1) throw ContractError("layer_norm: empty feature axis");
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    throw ShapeError("layer_norm: gain/bias must be [1," + std::to_string(x.cols()) + "]");
  Tape<S>* t = detail::active_tape<S>({&x, &gain, &bias});
  const S d = static_cast<S>(x.cols());
  Mat<S> mu = x.v().rowwise().mean();                              // [L,1]
  Mat<S> cent = x.v().array().colwise() - mu.array().col(0);       // [L,d]
  Mat<S> var = cent.array().square().rowwise().sum() / d;          // [L,1]
  Mat<S> inv_sd = (var.array() + eps).sqrt().inverse();            // [L,1]
  Mat<S> xhat = cent.array().colwise() * inv_sd.array().col(0);    // [L,d]
  Mat<S> out = (xhat.array().rowwise() * gain.v().array().row(0)).rowwise() + bias.v().array().row(0);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node, ig = gain.node, ib = bias.node;
  auto gp = gain.vp;
  auto xh = std::make_shared<Mat<S>>(std::move(xhat));
  auto is = std::make_shared<Mat<S>>(std::move(inv_sd));
  return detail::emit<S>(t, std::move(out), [ix, ig, ib, gp, xh, is, d](Tape<S>& tp, const Mat<S>& g) {
    if (ib >= 0) tp.grad_acc(ib) += g.colwise().sum();
    if (ig >= 0) tp.grad_acc(ig) += g.cwiseProduct(*xh).colwise().sum();
    if (ix >= 0) {
      Mat<S> gg = g.array().rowwise() * gp->array().row(0);        // dL/dxhat
      Mat<S> m1 = gg.rowwise().mean();                             // [L,1]
      Mat<S> m2 = gg.cwiseProduct(*xh).rowwise().mean();           // [L,1]
      Mat<S> dx = gg;
      dx.array().colwise() -= m1.array().col(0);
      dx.array() -= xh->array().colwise() * m2.array().col(0);
      tp.grad_acc(ix) += (dx.array().colwise() * is->array().col(0)).matrix();
    }
  });
}

// ---------------------------------------------------------------------------
// sequence-axis permutations

// Reverse rows. flip_seq(flip_seq(x)) == x exactly.
template <class S>
Var<S> flip_seq(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = x.v().colwise().reverse();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix) += g.colwise().reverse();
  });
}

// Move every row one step later; row 0 becomes zeros, last row is dropped.
template <class S>
Var<S> shift_seq(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  const Eigen::Index L = x.rows();
  Mat<S> out = Mat<S>::Zero(L, x.cols());
  if (L > 1) out.bottomRows(L - 1) = x.v().topRows(L - 1);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix, L](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0 && L > 1) tp.grad_acc(ix).topRows(L - 1) += g.bottomRows(L - 1);
  });
}

// ---------------------------------------------------------------------------
// slicing / concatenation / reductions

template <class S>
Var<S> slice_cols(const Var<S>& x, Eigen::Index c0, Eigen::Index nc) {
  if (c0 < 0 || nc < 0 || c0 + nc > x.cols())
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + nc) +
                     ") out of " + shape_str(x.v()));
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = x.v().middleCols(c0, nc);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix, c0, nc](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix).middleCols(c0, nc) += g;
  });
}

template <class S>
Var<S> slice_rows(const Var<S>& x, Eigen::Index r0, Eigen::Index nr) {
  if (r0 < 0 || nr < 0 || r0 + nr > x.rows())
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + nr) +
                     ") out of " + shape_str(x.v()));
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out = x.v().middleRows(r0, nr);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix, r0, nr](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix).middleRows(r0, nr) += g;
  });
}

// Gather rows by index (duplicates allowed); backward scatter-adds.
template <class S>
Var<S> select_rows(const Var<S>& x, std::vector<int> idx) {
  for (int i : idx)
    if (i < 0 || i >= x.rows()) throw ShapeError("select_rows: index " + std::to_string(i) + " out of " + shape_str(x.v()));
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.v().row(idx[i]);
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix, idx = std::move(idx)](Tape<S>& tp, const Mat<S>& g) {
    if (ix < 0) return;
    Mat<S>& acc = tp.grad_acc(ix);
    for (size_t i = 0; i < idx.size(); ++i) acc.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  std::vector<const Var<S>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape<S>* t = nullptr;
  for (const auto& p : parts)
    if (p.recorded()) {
      if (t && t != p.tape) throw ContractError("operands recorded on different tapes");
      t = p.tape;
    }
  Mat<S> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.v();
    c += p.cols();
  }
  if (!t) return detail::emit<S>(t, std::move(out), {});
  std::vector<std::pair<int, Eigen::Index>> spans;  // (node, width)
  for (const auto& p : parts) spans.emplace_back(p.node, p.cols());
  return detail::emit<S>(t, std::move(out), [spans = std::move(spans)](Tape<S>& tp, const Mat<S>& g) {
    Eigen::Index c = 0;
    for (auto [node, w] : spans) {
      if (node >= 0) tp.grad_acc(node) += g.middleCols(c, w);
      c += w;
    }
  });
}

template <class S>
Var<S> sum_all(const Var<S>& x) {
  Tape<S>* t = detail::active_tape<S>({&x});
  Mat<S> out(1, 1);
  out(0, 0) = x.v().sum();
  if (!t) return detail::emit<S>(t, std::move(out), {});
  int ix = x.node;
  return detail::emit<S>(t, std::move(out), [ix](Tape<S>& tp, const Mat<S>& g) {
    if (ix >= 0) tp.grad_acc(ix).array() += g(0, 0);
  });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.rows() * x.cols()));
}

}  // namespace ticl
