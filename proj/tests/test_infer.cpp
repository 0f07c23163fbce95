#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "ticl/infer.hpp"
#include "ticl/model.hpp"
#include "ticl/prior.hpp"
#include "ticl/rng.hpp"

using namespace ticl;

namespace {

ModelConfig tiny_config(Backbone b) {
  ModelConfig cfg;
  cfg.backbone = b;
  cfg.num_layers = (b == Backbone::kAttention) ? 1 : 2;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.num_heads = 2;
  cfg.state_dim = 4;
  cfg.max_features = 4;
  cfg.max_classes = 3;
  cfg.seed = 13;
  return cfg;
}

// Zero-initialized residual projections make a fresh model ignore the
// context entirely, so give every parameter some signal.
void randomize_params(PfnModelD& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, p] : model.params)
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += 0.4 * rng.normal();
}

PfnModelD make_model(Backbone b, std::uint64_t seed = 21) {
  PfnModelD m = init_model(tiny_config(b));
  randomize_params(m, seed);
  return m;
}

struct Case {
  MatD Xc, Xq;
  std::vector<int> yc;
};

Case make_case(std::uint64_t seed, Eigen::Index ctx = 24, Eigen::Index q = 6,
               Eigen::Index f = 3, int classes = 3) {
  Rng rng(seed);
  Case c;
  c.Xc = MatD(ctx, f);
  c.Xq = MatD(q, f);
  for (Eigen::Index i = 0; i < ctx; ++i)
    for (Eigen::Index j = 0; j < f; ++j) c.Xc(i, j) = rng.normal();
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < f; ++j) c.Xq(i, j) = rng.normal();
  for (Eigen::Index i = 0; i < ctx; ++i)
    c.yc.push_back(rng.uniform_int(classes));
  for (int k = 0; k < classes; ++k) c.yc[static_cast<std::size_t>(k)] = k;  // cover all classes
  return c;
}

double sym_kl(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q) {
  double out = 0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    const double pj = std::max(p(j), 1e-12);
    const double qj = std::max(q(j), 1e-12);
    out += pj * std::log(pj / qj) + qj * std::log(qj / pj);
  }
  return 0.5 * out;
}

}  // namespace

TEST_CASE("predictions are rows of valid probability distributions") {
  PfnModelD model = make_model(Backbone::kUnidirectional);
  for (int rep = 0; rep < 50; ++rep) {
    Case c = make_case(1000 + static_cast<std::uint64_t>(rep), 16, 20);
    Distributions p = predict(model, c.Xc, c.yc, c.Xq);
    REQUIRE(p.rows() == 20);
    REQUIRE(p.cols() == 3);
    CHECK((p.array() >= 0).all());
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("duplicate query rows receive identical distributions") {
  Case c = make_case(5, 20, 4);
  MatD Xq(3, c.Xq.cols());
  Xq.row(0) = c.Xq.row(0);
  Xq.row(1) = c.Xq.row(1);
  Xq.row(2) = c.Xq.row(0);

  // Attention treats query tokens as a set, so duplicates coincide even in a
  // joint pass. Scan backbones are position-sensitive across query slots;
  // there the guarantee holds in one-by-one mode, where each query runs at
  // the same position.
  PfnModelD att = make_model(Backbone::kAttention);
  Distributions p = predict(att, c.Xc, c.yc, Xq);
  CHECK((p.row(0) - p.row(2)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((p.row(0) - p.row(1)).cwiseAbs().maxCoeff() > 0.0);

  PfnModelD bidi = make_model(Backbone::kBidirectional);
  Distributions solo = predict(bidi, c.Xc, c.yc, Xq, /*one_by_one=*/true);
  CHECK((solo.row(0) - solo.row(2)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((solo.row(0) - solo.row(1)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("attention predictions ignore context order") {
  PfnModelD model = make_model(Backbone::kAttention);
  Case c = make_case(7);
  Distributions base = predict(model, c.Xc, c.yc, c.Xq);
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    auto [Xp, yp] = shuffle_context(rng, c.Xc, c.yc);
    Distributions shuffled = predict(model, Xp, yp, c.Xq);
    CHECK((shuffled - base).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("selective-scan predictions depend on context order") {
  PfnModelD model = make_model(Backbone::kUnidirectional);
  Case c = make_case(7);
  Distributions base = predict(model, c.Xc, c.yc, c.Xq);
  Rng rng(11);
  auto [Xp, yp] = shuffle_context(rng, c.Xc, c.yc);
  Distributions shuffled = predict(model, Xp, yp, c.Xq);
  CHECK((shuffled - base).cwiseAbs().maxCoeff() > 1e-12);
}

TEST_CASE("shuffle keeps rows and labels paired") {
  Case c = make_case(9, 12, 1);
  Rng rng(2);
  auto [Xp, yp] = shuffle_context(rng, c.Xc, c.yc);
  REQUIRE(Xp.rows() == c.Xc.rows());
  REQUIRE(yp.size() == c.yc.size());

  // Every original (row, label) pair appears exactly once.
  std::vector<bool> used(static_cast<std::size_t>(c.Xc.rows()), false);
  for (Eigen::Index i = 0; i < Xp.rows(); ++i) {
    bool found = false;
    for (Eigen::Index j = 0; j < c.Xc.rows(); ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      if ((Xp.row(i) - c.Xc.row(j)).cwiseAbs().maxCoeff() == 0.0 &&
          yp[static_cast<std::size_t>(i)] == c.yc[static_cast<std::size_t>(j)]) {
        used[static_cast<std::size_t>(j)] = true;
        found = true;
        break;
      }
    }
    CHECK(found);
  }

  SUBCASE("fixed seed gives a fixed permutation") {
    Rng rng2(2);
    auto [Xp2, yp2] = shuffle_context(rng2, c.Xc, c.yc);
    CHECK((Xp2 - Xp).cwiseAbs().maxCoeff() == 0.0);
    CHECK(yp2 == yp);
  }
  SUBCASE("single-row context is unchanged") {
    MatD one = c.Xc.topRows(1);
    std::vector<int> oney = {c.yc[0]};
    auto [Xp1, yp1] = shuffle_context(rng, one, oney);
    CHECK((Xp1 - one).cwiseAbs().maxCoeff() == 0.0);
    CHECK(yp1 == oney);
  }
}

TEST_CASE("rcp with r=1 is a single shuffled predict call") {
  PfnModelD model = make_model(Backbone::kUnidirectional);
  Case c = make_case(15);
  RcpConfig cfg;
  cfg.r = 1;
  cfg.seed = 77;
  Distributions rcp = rcp_predict(model, c.Xc, c.yc, c.Xq, cfg);

  Rng rng(sub_seed(77, 0));
  auto [Xp, yp] = shuffle_context(rng, c.Xc, c.yc);
  Distributions direct = predict(model, Xp, yp, c.Xq);
  CHECK(std::memcmp(rcp.data(), direct.data(),
                    sizeof(double) * static_cast<std::size_t>(rcp.size())) == 0);
}

TEST_CASE("rcp output is a valid distribution per query") {
  PfnModelD model = make_model(Backbone::kBidirectional);
  Case c = make_case(19);
  RcpConfig cfg;
  cfg.r = 5;
  Distributions p = rcp_predict(model, c.Xc, c.yc, c.Xq, cfg);
  CHECK((p.array() >= 0).all());
  for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
}

TEST_CASE("rcp on the attention backbone is a no-op") {
  PfnModelD model = make_model(Backbone::kAttention);
  Case c = make_case(23);
  RcpConfig cfg;
  cfg.r = 8;
  Distributions rcp = rcp_predict(model, c.Xc, c.yc, c.Xq, cfg);
  Distributions plain = predict(model, c.Xc, c.yc, c.Xq);
  CHECK((rcp - plain).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("pairwise mean ignores input order") {
  Rng rng(31);
  std::vector<MatD> parts;
  for (int k = 0; k < 7; ++k) {
    MatD m(4, 3);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
    parts.push_back(m);
  }
  MatD fwd = pairwise_mean(parts);
  std::reverse(parts.begin(), parts.end());
  MatD rev = pairwise_mean(parts);
  CHECK((fwd - rev).cwiseAbs().maxCoeff() < 1e-12);

  Rng perm_rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    perm_rng.shuffle(parts);
    CHECK((pairwise_mean(parts) - fwd).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(pairwise_mean({}), ContractError);
}

TEST_CASE("one-by-one prediction matches the joint pass per query") {
  // Queries are masked tokens: with causal or bidirectional mixing they can
  // in principle see each other, so parity is a behavioral check, not exact.
  for (Backbone b :
       {Backbone::kAttention, Backbone::kUnidirectional, Backbone::kBidirectional}) {
    CAPTURE(backbone_name(b));
    PfnModelD model = make_model(b);
    Case c = make_case(27);
    Distributions joint = predict(model, c.Xc, c.yc, c.Xq);
    Distributions solo = predict(model, c.Xc, c.yc, c.Xq, /*one_by_one=*/true);
    REQUIRE(joint.rows() == solo.rows());
    for (Eigen::Index i = 0; i < joint.rows(); ++i) CHECK(std::abs(solo.row(i).sum() - 1.0) < 1e-9);

    // The unidirectional scan cannot let earlier queries see later ones, so
    // the first query's joint and solo predictions agree.
    if (b == Backbone::kUnidirectional)
      CHECK((joint.row(0) - solo.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("empty query set yields an empty result") {
  PfnModelD model = make_model(Backbone::kAttention);
  Case c = make_case(29);
  Distributions p = predict(model, c.Xc, c.yc, MatD(0, c.Xc.cols()));
  CHECK(p.rows() == 0);
  CHECK(p.cols() == model.cfg.max_classes);
}

TEST_CASE("averaging permutations shrinks order sensitivity on the scan backbone") {
  PfnModelD model = make_model(Backbone::kUnidirectional, 101);
  PriorConfig prior;
  prior.min_features = 2;
  prior.max_features = 4;
  prior.min_classes = 2;
  prior.max_classes = 3;
  prior.rows = 40;
  prior.context_rows = 32;
  prior.hidden_width = 8;
  prior.hidden_depth = 1;

  double kl_r1 = 0;
  double kl_r8 = 0;
  const int tasks = 30;
  for (int t = 0; t < tasks; ++t) {
    TabularTask task = sample_task(prior, 1000 + static_cast<std::uint64_t>(t));
    const MatD Xc = task.context_X();
    const MatD Xq = task.query_X();
    const std::vector<int> yc = task.context_y();
    for (int r : {1, 8}) {
      RcpConfig a{r, 500 + static_cast<std::uint64_t>(t)};
      RcpConfig b{r, 900000 + static_cast<std::uint64_t>(t)};
      Distributions pa = rcp_predict(model, Xc, yc, Xq, a);
      Distributions pb = rcp_predict(model, Xc, yc, Xq, b);
      double kl = 0;
      for (Eigen::Index i = 0; i < pa.rows(); ++i) kl += sym_kl(pa.row(i), pb.row(i));
      kl /= static_cast<double>(pa.rows());
      (r == 1 ? kl_r1 : kl_r8) += kl;
    }
  }
  kl_r1 /= tasks;
  kl_r8 /= tasks;
  CAPTURE(kl_r1);
  CAPTURE(kl_r8);
  CHECK(kl_r8 < kl_r1);
}

TEST_CASE("rcp wall-clock grows linearly in r") {
  PfnModelD model = make_model(Backbone::kAttention);
  Case c = make_case(41, 192, 16);
  RcpConfig one{1, 3};
  RcpConfig eight{8, 3};
  // Warm caches before timing.
  rcp_predict(model, c.Xc, c.yc, c.Xq, one);
  rcp_predict(model, c.Xc, c.yc, c.Xq, eight);

  auto clock_median = [&](const RcpConfig& cfg) {
    std::vector<double> times;
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      rcp_predict(model, c.Xc, c.yc, c.Xq, cfg);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };

  const double t1 = clock_median(one);
  const double t8 = clock_median(eight);
  const double ratio = t8 / t1;
  CAPTURE(t1);
  CAPTURE(t8);
  CHECK(ratio >= 6.0);
  CHECK(ratio <= 10.0);
}
