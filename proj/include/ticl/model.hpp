#pragma once

// The three interchangeable encoder stacks and the tabular embedding +
// classification head around them.
//
// A PfnModel owns named weight matrices; bind_params turns them into Vars on
// a tape (training) or free constants (inference). Rows are embedded as
// feature-projection + label-embedding tokens; query rows carry the MASK
// label (table index 0) and are always appended after the context so the
// unidirectional backbone can see the full context.

#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/rng.hpp"
#include "ticl/ssm.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

inline constexpr int kMaskLabel = -1;

enum class Backbone { kAttention, kUnidirectional, kBidirectional };

inline const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::kAttention: return "attention";
    case Backbone::kUnidirectional: return "unidirectional";
    case Backbone::kBidirectional: return "bidirectional";
  }
  return "?";
}

inline Backbone backbone_from_name(const std::string& s) {
  if (s == "attention") return Backbone::kAttention;
  if (s == "unidirectional") return Backbone::kUnidirectional;
  if (s == "bidirectional") return Backbone::kBidirectional;
  throw ConfigError("unknown backbone '" + s + "' (want attention|unidirectional|bidirectional)");
}

struct ModelConfig {
  Backbone backbone = Backbone::kAttention;
  int num_layers = 3;
  int embed_dim = 64;
  int hidden_dim = 128;
  int num_heads = 4;   // attention only
  int state_dim = 16;  // SSM only
  int max_features = 10;
  int max_classes = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (embed_dim < 1 || hidden_dim < 1) throw ConfigError("embed/hidden dims must be >= 1");
    if (max_features < 1) throw ConfigError("max_features must be >= 1");
    if (max_classes < 2) throw ConfigError("max_classes must be >= 2");
    if (backbone == Backbone::kAttention && embed_dim % num_heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    if (backbone != Backbone::kAttention && state_dim < 1)
      throw ConfigError("state_dim must be >= 1");
  }
};

// Desk-scale defaults; SSM stacks get twice the attention layer count at the
// same width tier.
inline ModelConfig default_config(Backbone b) {
  ModelConfig c;
  c.backbone = b;
  c.num_layers = (b == Backbone::kAttention) ? 3 : 6;
  return c;
}

template <class S>
struct PfnModel {
  ModelConfig cfg;
  std::map<std::string, Mat<S>> params;  // name-ordered; the checkpoint relies on this
};

using PfnModelD = PfnModel<double>;

namespace detail {

inline MatD init_fanin_uniform(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols) {
  Rng rng(seed);
  const double s = std::sqrt(1.0 / static_cast<double>(rows));
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-s, s);
  return m;
}

// Channel-spread decay rates: -A_cont = exp(a_log) log-spaced over [0.5, 8].
inline MatD init_a_log(Eigen::Index d) {
  MatD m(1, d);
  const double lo = std::log(0.5), hi = std::log(8.0);
  for (Eigen::Index j = 0; j < d; ++j)
    m(0, j) = lo + (hi - lo) * (d > 1 ? static_cast<double>(j) / (d - 1) : 0.5);
  return m;
}

// Step-size bias such that softplus(b_dt) lands log-uniformly in [1e-3, 1e-1].
inline MatD init_b_dt(std::uint64_t seed) {
  Rng rng(seed);
  const double delta = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
  return MatD::Constant(1, 1, std::log(std::expm1(delta)));
}

}  // namespace detail

inline PfnModelD init_model(const ModelConfig& cfg) {
  cfg.validate();
  PfnModelD m;
  m.cfg = cfg;
  const Eigen::Index e = cfg.embed_dim, h = cfg.hidden_dim, n = cfg.state_dim, c = cfg.max_classes;

  auto seed_for = [&](const std::string& name) { return mix64(cfg.seed ^ fnv1a64(name)); };
  auto fanin = [&](const std::string& name, Eigen::Index r, Eigen::Index co) {
    m.params[name] = detail::init_fanin_uniform(seed_for(name), r, co);
  };
  auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index co) {
    m.params[name] = MatD::Zero(r, co);
  };
  auto ones = [&](const std::string& name, Eigen::Index r, Eigen::Index co) {
    m.params[name] = MatD::Ones(r, co);
  };

  fanin("embed.feature_w", cfg.max_features, e);
  fanin("embed.label_table", c + 1, e);
  ones("final_ln.gain", 1, e);
  zeros("final_ln.bias", 1, e);
  fanin("head.w", e, c);
  zeros("head.b", 1, c);

  auto ssm_direction = [&](const std::string& pre) {
    fanin(pre + "w_dt", e, 1);
    m.params[pre + "b_dt"] = detail::init_b_dt(seed_for(pre + "b_dt"));
    fanin(pre + "w_b", e, n);
    fanin(pre + "w_c", e, n);
    m.params[pre + "a_log"] = detail::init_a_log(e);
  };

  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string L = "layer" + std::to_string(i) + ".";
    ones(L + "ln1.gain", 1, e);
    zeros(L + "ln1.bias", 1, e);
    ones(L + "ln2.gain", 1, e);
    zeros(L + "ln2.bias", 1, e);
    if (cfg.backbone == Backbone::kAttention) {
      fanin(L + "att.wq", e, e);
      fanin(L + "att.wk", e, e);
      fanin(L + "att.wv", e, e);
      zeros(L + "att.wo", e, e);  // residual branch starts as identity
      fanin(L + "ff.w1", e, h);
      zeros(L + "ff.b1", 1, h);
      zeros(L + "ff.w2", h, e);
      zeros(L + "ff.b2", 1, e);
    } else {
      fanin(L + "mix.w_v", e, e);
      fanin(L + "mix.w_g", e, e);
      ones(L + "mix.d_skip", 1, e);
      zeros(L + "mix.w_out", e, e);
      if (cfg.backbone == Backbone::kUnidirectional) {
        ssm_direction(L + "mix.");
      } else {
        ssm_direction(L + "mix.fwd.");
        ssm_direction(L + "mix.bwd.");
      }
      fanin(L + "ff.w1", e, h);
      fanin(L + "ff.w3", e, h);
      zeros(L + "ff.w2", h, e);
    }
  }
  return m;
}

// Weights as Vars: registered on `tape` when given (training), free constants
// otherwise (inference, with progressive memory release).
template <class S>
struct BoundModel {
  ModelConfig cfg;
  std::map<std::string, Var<S>> p;

  const Var<S>& at(const std::string& name) const {
    auto it = p.find(name);
    if (it == p.end()) throw ContractError("model parameter '" + name + "' missing");
    return it->second;
  }
};

template <class S>
BoundModel<S> bind_params(const PfnModel<S>& m, std::type_identity_t<Tape<S>*> tape = nullptr) {
  BoundModel<S> b;
  b.cfg = m.cfg;
  for (const auto& [name, value] : m.params)
    b.p[name] = tape ? tape->param(value) : constant<S>(Mat<S>(value));
  return b;
}

// ---------------------------------------------------------------------------
// embedding

// Z-normalize each column using statistics of the first n_context rows only,
// zero constant columns, and zero-pad to max_features.
template <class S>
Mat<S> normalize_features(const Mat<S>& X, Eigen::Index n_context, Eigen::Index max_features) {
  if (X.cols() > max_features)
    throw DataError("too many features: " + std::to_string(X.cols()) + " > max_features " +
                    std::to_string(max_features));
  Mat<S> out = Mat<S>::Zero(X.rows(), max_features);
  if (n_context <= 0) return out;  // no context statistics; all columns zeroed
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const S mu = X.col(j).head(n_context).mean();
    const S var = (X.col(j).head(n_context).array() - mu).square().mean();
    const S sd = std::sqrt(var);
    if (sd < S(1e-12) * (S(1) + std::abs(mu))) continue;  // constant column -> zeros
    out.col(j) = (X.col(j).array() - mu) / sd;
  }
  return out;
}

// labels[i] in {kMaskLabel, 0..max_classes-1}; table index 0 is the mask.
template <class S>
Var<S> embed_rows(const BoundModel<S>& m, const Mat<S>& X, const std::vector<int>& labels,
                  Eigen::Index n_context) {
  if (static_cast<Eigen::Index>(labels.size()) != X.rows())
    throw ShapeError("embed_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(X.rows()) + " rows");
  std::vector<int> idx(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kMaskLabel) {
      idx[i] = 0;
    } else if (labels[i] >= 0 && labels[i] < m.cfg.max_classes) {
      idx[i] = labels[i] + 1;
    } else {
      throw DataError("label " + std::to_string(labels[i]) + " outside 0.." +
                      std::to_string(m.cfg.max_classes - 1));
    }
  }
  Mat<S> Xp = normalize_features<S>(X, n_context, m.cfg.max_features);
  Var<S> proj = matmul(constant<S>(std::move(Xp)), m.at("embed.feature_w"));
  return add(proj, select_rows(m.at("embed.label_table"), std::move(idx)));
}

// ---------------------------------------------------------------------------
// blocks (pre-norm, residual)

template <class S>
Var<S> attention_block(const BoundModel<S>& m, int layer, const Var<S>& x) {
  const std::string L = "layer" + std::to_string(layer) + ".";
  const Eigen::Index e = m.cfg.embed_dim, heads = m.cfg.num_heads, hd = e / heads;
  Var<S> u = layer_norm(x, m.at(L + "ln1.gain"), m.at(L + "ln1.bias"));
  Var<S> q = matmul(u, m.at(L + "att.wq"));
  Var<S> k = matmul(u, m.at(L + "att.wk"));
  Var<S> v = matmul(u, m.at(L + "att.wv"));
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(hd));
  std::vector<Var<S>> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (Eigen::Index hh = 0; hh < heads; ++hh) {
    Var<S> qh = slice_cols(q, hh * hd, hd);
    Var<S> kh = slice_cols(k, hh * hd, hd);
    Var<S> vh = slice_cols(v, hh * hd, hd);
    Var<S> att = softmax(scale(matmul(qh, transpose(kh)), inv_scale), 1);
    head_outs.push_back(matmul(att, vh));
  }
  Var<S> mixed = matmul(concat_cols(head_outs), m.at(L + "att.wo"));
  Var<S> y = add(x, mixed);

  Var<S> u2 = layer_norm(y, m.at(L + "ln2.gain"), m.at(L + "ln2.bias"));
  Var<S> hmid = gelu(add_rowvec(matmul(u2, m.at(L + "ff.w1")), m.at(L + "ff.b1")));
  Var<S> ff = add_rowvec(matmul(hmid, m.at(L + "ff.w2")), m.at(L + "ff.b2"));
  return add(y, ff);
}

namespace detail {

// Token-conditioned scan parameters for one direction. `flip` hands the
// position-wise tensors to a scan that consumes the sequence reversed.
template <class S>
ScanParams<S> selective_params(const BoundModel<S>& m, const std::string& pre, const Var<S>& u,
                               bool flip) {
  Var<S> delta = softplus(add_rowvec(matmul(u, m.at(pre + "w_dt")), m.at(pre + "b_dt")));
  Var<S> cont = neg(exp_elem(m.at(pre + "a_log")));
  Var<S> b_raw = matmul(u, m.at(pre + "w_b"));
  auto [decay, input] = discretize(delta, cont, b_raw);
  Var<S> output = matmul(u, m.at(pre + "w_c"));
  ScanParams<S> p;
  p.decay = flip ? flip_seq(decay) : decay;
  p.input = flip ? flip_seq(input) : input;
  p.output = flip ? flip_seq(output) : output;
  return p;
}

}  // namespace detail

template <class S>
Var<S> ssm_block(const BoundModel<S>& m, int layer, const Var<S>& x) {
  const std::string L = "layer" + std::to_string(layer) + ".";
  const std::string M = L + "mix.";
  Var<S> u = layer_norm(x, m.at(L + "ln1.gain"), m.at(L + "ln1.bias"));
  Var<S> v = silu(matmul(u, m.at(M + "w_v")));
  Var<S> mixed;
  if (m.cfg.backbone == Backbone::kUnidirectional) {
    ScanParams<S> p = detail::selective_params(m, M, u, false);
    p.skip = m.at(M + "d_skip");
    mixed = selective_scan(v, p);
  } else {
    ScanParams<S> fwd = detail::selective_params(m, M + "fwd.", u, false);
    ScanParams<S> bwd = detail::selective_params(m, M + "bwd.", u, true);
    mixed = hydra_mix(v, fwd, bwd, m.at(M + "d_skip"));
  }
  Var<S> gated = mul(mixed, silu(matmul(u, m.at(M + "w_g"))));
  Var<S> y = add(x, matmul(gated, m.at(M + "w_out")));

  Var<S> u2 = layer_norm(y, m.at(L + "ln2.gain"), m.at(L + "ln2.bias"));
  Var<S> ff = matmul(mul(silu(matmul(u2, m.at(L + "ff.w1"))), matmul(u2, m.at(L + "ff.w3"))),
                     m.at(L + "ff.w2"));
  return add(y, ff);
}

template <class S>
Var<S> encode(const BoundModel<S>& m, const Var<S>& tokens) {
  Var<S> x = tokens;
  for (int i = 0; i < m.cfg.num_layers; ++i)
    x = (m.cfg.backbone == Backbone::kAttention) ? attention_block(m, i, x) : ssm_block(m, i, x);
  return layer_norm(x, m.at("final_ln.gain"), m.at("final_ln.bias"));
}

// ---------------------------------------------------------------------------
// PFN forward

// Context rows (labeled) followed by query rows (masked); logits only for the
// queries. Empty context is allowed — predictions then reflect the trained
// label prior. Q = 0 yields an empty logits matrix.
template <class S>
Var<S> pfn_forward(const BoundModel<S>& m, const Mat<S>& Xctx, const std::vector<int>& y_ctx,
                   const Mat<S>& Xq) {
  if (static_cast<Eigen::Index>(y_ctx.size()) != Xctx.rows())
    throw ShapeError("pfn_forward: " + std::to_string(y_ctx.size()) + " labels for " +
                     std::to_string(Xctx.rows()) + " context rows");
  if (Xctx.rows() > 0 && Xq.rows() > 0 && Xctx.cols() != Xq.cols())
    throw ShapeError("pfn_forward: context has " + std::to_string(Xctx.cols()) +
                     " features, queries " + std::to_string(Xq.cols()));
  for (int y : y_ctx)
    if (y == kMaskLabel) throw DataError("context rows must be labeled");

  const Eigen::Index nc = Xctx.rows(), nq = Xq.rows();
  const Eigen::Index f = (nc > 0) ? Xctx.cols() : Xq.cols();
  Mat<S> X(nc + nq, f);
  if (nc > 0) X.topRows(nc) = Xctx;
  if (nq > 0) X.bottomRows(nq) = Xq;
  std::vector<int> labels(y_ctx);
  labels.resize(static_cast<size_t>(nc + nq), kMaskLabel);

  Var<S> tokens = embed_rows(m, X, labels, nc);
  Var<S> enc = encode(m, tokens);
  Var<S> hq = slice_rows(enc, nc, nq);
  return add_rowvec(matmul(hq, m.at("head.w")), m.at("head.b"));
}

}  // namespace ticl
