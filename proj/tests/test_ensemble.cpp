#include "doctest.h"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "bam/base_learner.hpp"
#include "bam/ensemble.hpp"

using namespace bam;

namespace {

template <typename S>
Tensor<S> random_features(std::vector<int> shape, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(rng.normal());
  return t;
}

/// Explicit O(C^2 N) double-loop oracle for the Gram signature.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> gram_oracle(const Tensor<S>& f,
                                                             bool normalized) {
  const int c = f.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(f.dim(1)) * f.dim(2);
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> g(c, c);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      S acc = S(0);
      for (std::int64_t k = 0; k < n; ++k) acc += f.data[i * n + k] * f.data[j * n + k];
      g(i, j) = normalized ? acc / static_cast<S>(n) : acc;
    }
  return g;
}

}  // namespace

TEST_CASE("gram matrix hand values and oracle equivalence") {
  // C=1, values [1,2,3,4]: unnormalized 30, normalized 7.5
  Tensor<double> f({1, 2, 2}, {1, 2, 3, 4});
  CHECK(gram_matrix(f, false).matrix(0, 0) == doctest::Approx(30.0));
  CHECK(gram_matrix(f, true).matrix(0, 0) == doctest::Approx(7.5));

  Tensor<double> zero({3, 2, 2});
  CHECK(gram_matrix(zero).matrix.norm() == doctest::Approx(0.0));

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> ft = random_features<double>({5, 3, 4}, rng);
    for (bool normalized : {true, false}) {
      auto g = gram_matrix(ft, normalized).matrix;
      auto oracle = gram_oracle(ft, normalized);
      CHECK((g - oracle).norm() <= 1e-6 * std::max(1.0, oracle.norm()));
      // symmetric positive semi-definite by construction
      CHECK((g - g.transpose()).norm() <= 1e-9 * std::max(1.0, g.norm()));
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g);
      CHECK(eig.eigenvalues().minCoeff() >= -1e-8 * std::max(1.0, g.norm()));
    }
  }
}

TEST_CASE("adjustment factor hand values and metric properties") {
  GramSignature<double> a, b;
  a.matrix = Eigen::MatrixXd::Constant(1, 1, 7.5);
  b.matrix = Eigen::MatrixXd::Constant(1, 1, 1.0);
  CHECK(adjustment_factor(a, b) == doctest::Approx(6.5));
  CHECK(adjustment_factor(a, a) == doctest::Approx(0.0));

  GramSignature<double> wrong;
  wrong.matrix = Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS(adjustment_factor(a, wrong));

  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    auto ga = gram_matrix(random_features<double>({4, 3, 3}, rng));
    auto gb = gram_matrix(random_features<double>({4, 3, 3}, rng));
    auto gc = gram_matrix(random_features<double>({4, 3, 3}, rng));
    const double ab = adjustment_factor(ga, gb);
    const double ba = adjustment_factor(gb, ga);
    CHECK(ab == doctest::Approx(ba));
    CHECK(ab >= 0.0);
    // triangle inequality of the Frobenius metric
    CHECK(adjustment_factor(ga, gc) <= ab + adjustment_factor(gb, gc) + 1e-9);
  }

  // identical inputs give psi = 0 through the full pipeline
  Tensor<double> f = random_features<double>({4, 3, 3}, rng);
  CHECK(adjustment_factor(gram_matrix(f), gram_matrix(f)) == doctest::Approx(0.0));
}

TEST_CASE("psi squash statistic tracks the running median") {
  PsiStat stat;
  CHECK(stat.median() == doctest::Approx(1.0));  // default before observations
  stat.observe(2.0);
  CHECK(stat.median() == doctest::Approx(2.0));
  stat.observe(6.0);
  CHECK(stat.median() == doctest::Approx(4.0));
  stat.observe(4.0);
  CHECK(stat.median() == doctest::Approx(4.0));
  CHECK(stat.squash(4.0) == doctest::Approx(0.5));
  CHECK(stat.squash(0.0) == doctest::Approx(0.0));

  PsiStat restored;
  restored.restore(3.0, 100);
  CHECK(restored.median() == doctest::Approx(3.0));
  CHECK(restored.squash(3.0) == doctest::Approx(0.5));
}

TEST_CASE("adjustment pass-through at the prescribed initialization") {
  ParamStore<double> ps;
  Rng rng(3);
  EnsembleModule<double> ens(ps, /*identity_init=*/true, /*psi_enabled=*/true, rng);
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Tensor<double> channel = random_features<double>({1, 5, 5}, rng);
  Var<double> psi = g.constant(Tensor<double>::scalar(0.7));
  Var<double> adjusted = ens.adjust(p, g.constant(channel), psi);
  CHECK((adjusted.val().data - channel.data).abs().maxCoeff() <= 1e-7);
}

TEST_CASE("adjust with weights (1,1) adds the squashed psi pointwise") {
  ParamStore<double> ps;
  Rng rng(4);
  EnsembleModule<double> ens(ps, true, true, rng);
  ps.entry(ps.find("ens/w_psi")).value.data[1] = 1.0;  // (1, 1)
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Tensor<double> channel = random_features<double>({1, 3, 3}, rng);
  Var<double> adjusted = ens.adjust(p, g.constant(channel), g.constant(Tensor<double>::scalar(0.3)));
  for (std::int64_t i = 0; i < channel.size(); ++i)
    CHECK(adjusted.val().data[i] == doctest::Approx(channel.data[i] + 0.3));
}

TEST_CASE("shared psi weights serve background and foreground channels") {
  ParamStore<double> ps;
  Rng rng(5);
  EnsembleModule<double> ens(ps, true, true, rng);
  ps.entry(ps.find("ens/w_psi")).value.data[0] = 0.5;
  ps.entry(ps.find("ens/w_psi")).value.data[1] = 2.0;
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Tensor<double> prob2({2, 2, 2}, {0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6});
  Var<double> psi = g.constant(Tensor<double>::scalar(0.25));
  Var<double> bg = ens.adjust(p, slice_channels(g.constant(prob2), 0, 1), psi);
  Var<double> fg = ens.adjust(p, slice_channels(g.constant(prob2), 1, 2), psi);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(bg.val().data[i] == doctest::Approx(0.5 * prob2.data[i] + 2.0 * 0.25));
    CHECK(fg.val().data[i] == doctest::Approx(0.5 * prob2.data[4 + i] + 2.0 * 0.25));
  }
}

TEST_CASE("ensemble forward is the identity on the meta output at init") {
  ParamStore<double> ps;
  Rng rng(6);
  EnsembleModule<double> ens(ps, true, true, rng);
  Graph<double> g;
  ParamUser<double> p(g, ps);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> logits = random_features<double>({2, 4, 4}, rng);
    Var<double> meta_prob = softmax_channels(g.constant(logits));
    Var<double> base_fg = g.constant(random_features<double>({1, 4, 4}, rng));
    Var<double> psi = g.constant(Tensor<double>::scalar(rng.uniform()));
    Var<double> scores = ens.forward_scores(p, meta_prob, base_fg, psi);
    CHECK((scores.val().data - meta_prob.val().data).abs().maxCoeff() <= 1e-7);
    // argmax of the init-state output equals argmax of the meta map
    CHECK(base_argmax_mask(scores.val()) == base_argmax_mask(meta_prob.val()));
  }
}

TEST_CASE("w_ens (1,1) pushes base-class pixels toward background") {
  ParamStore<double> ps;
  Rng rng(7);
  EnsembleModule<double> ens(ps, true, true, rng);
  ps.entry(ps.find("ens/w_ens")).value.data[1] = 1.0;  // (1, 1)
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Tensor<double> meta_prob({2, 1, 1}, {0.4, 0.6});
  Tensor<double> base_fg({1, 1, 1}, {0.5});
  Var<double> scores = ens.forward_scores(p, g.constant(meta_prob), g.constant(base_fg),
                                          g.constant(Tensor<double>::scalar(0.0)));
  // background score = adjusted meta bg (0.4) + base foreground (0.5)
  CHECK(scores.val().at(0, 0, 0) == doctest::Approx(0.9));
  CHECK(scores.val().at(1, 0, 0) == doctest::Approx(0.6));
  // the pixel flips to background: 0.9 > 0.6
  CHECK(base_argmax_mask(scores.val()).at(0, 0) == 0);
}

TEST_CASE("total loss composes the final and meta terms") {
  Graph<double> g;
  Rng rng(8);
  Tensor<double> logits = random_features<double>({2, 3, 3}, rng);
  Var<double> meta_prob = softmax_channels(g.constant(logits));
  LabelMap gt(3, 3);
  for (int y = 0; y < 3; ++y) gt.at(y, 1) = 1;

  // lambda = 0: total equals the final term alone
  Var<double> l0 = total_loss(meta_prob, meta_prob, gt, 0.0);
  Var<double> lf = binary_cross_entropy_prob(slice_channels(meta_prob, 1, 2), gt);
  CHECK(l0.val()[0] == doctest::Approx(lf.val()[0]));

  // init identity (p_f == p_m) with lambda = 1: total = 2 * L_meta
  Var<double> l1 = total_loss(meta_prob, meta_prob, gt, 1.0);
  CHECK(l1.val()[0] == doctest::Approx(2.0 * lf.val()[0]));
}

TEST_CASE("total loss gradient through the ensemble matches finite differences") {
  ParamStore<double> ps;
  Rng rng(9);
  EnsembleModule<double> ens(ps, true, true, rng);
  Tensor<double> meta_logits = random_features<double>({2, 3, 3}, rng);
  Tensor<double> base_fg_t = random_features<double>({1, 3, 3}, rng);
  base_fg_t.data = base_fg_t.data.abs() / 2;
  LabelMap gt(3, 3);
  gt.at(1, 1) = 1;
  gt.at(2, 2) = 1;

  auto build = [&](Graph<double>& g, ParamUser<double>& p) {
    Var<double> meta_prob = softmax_channels(g.constant(meta_logits));
    Var<double> psi = g.constant(Tensor<double>::scalar(0.4));
    Var<double> scores = ens.forward_scores(p, meta_prob, g.constant(base_fg_t), psi);
    return total_loss(softmax_channels(scores), meta_prob, gt, 1.0);
  };
  Grads<double> grads = ps.make_grads();
  {
    Graph<double> g;
    ParamUser<double> p(g, ps);
    g.backward(build(g, p), &grads);
  }
  const double eps = 1e-6;
  for (const std::string name : {"ens/w_psi", "ens/w_ens"}) {
    auto& entry = ps.entry(ps.find(name));
    for (std::int64_t j = 0; j < 2; ++j) {
      const double orig = entry.value.data[j];
      entry.value.data[j] = orig + eps;
      Graph<double> gp;
      ParamUser<double> pp(gp, ps);
      const double lp = build(gp, pp).val()[0];
      entry.value.data[j] = orig - eps;
      Graph<double> gm;
      ParamUser<double> pm(gm, ps);
      const double lm = build(gm, pm).val()[0];
      entry.value.data[j] = orig;
      const double numeric = (lp - lm) / (2 * eps);
      const double analytic = grads.slots[static_cast<std::size_t>(ps.find(name))].data[j];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      CHECK(std::abs(numeric - analytic) / denom < 1e-4);
    }
  }
}

TEST_CASE("kshot weights: zero second layer gives uniform eta") {
  ParamStore<double> ps;
  Rng rng(10);
  KshotReweighter<double> rw(ps, 5, 1, rng);
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Var<double> eta = rw.weights(g, p, {3.0, 100.0, 0.1, 7.0, 42.0});
  for (int i = 0; i < 5; ++i) CHECK(eta.val()[i] == doctest::Approx(0.2));
}

TEST_CASE("kshot weights stay positive and normalized for random params") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    ParamStore<double> ps;
    KshotReweighter<double> rw(ps, 4, 2, rng);
    // randomize both layers
    for (const std::string name : {"ens/kshot/w1", "ens/kshot/w2"}) {
      auto& e = ps.entry(ps.find(name));
      for (std::int64_t i = 0; i < e.value.size(); ++i) e.value.data[i] = rng.normal();
    }
    Graph<double> g;
    ParamUser<double> p(g, ps);
    std::vector<double> psi = {rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10),
                               rng.uniform(0, 10)};
    Var<double> eta = rw.weights(g, p, psi);
    double sum = 0;
    for (int i = 0; i < 4; ++i) {
      CHECK(eta.val()[i] > 0.0);
      sum += eta.val()[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("kshot reduction must divide the shot count") {
  ParamStore<double> ps;
  Rng rng(12);
  CHECK_THROWS(KshotReweighter<double>(ps, 5, 2, rng));
}

TEST_CASE("single-shot weights are exactly one for any parameters") {
  Rng rng(21);
  ParamStore<double> ps;
  KshotReweighter<double> rw(ps, 1, 1, rng);
  for (const std::string name : {"ens/kshot/w1", "ens/kshot/w2"}) {
    auto& e = ps.entry(ps.find(name));
    for (std::int64_t i = 0; i < e.value.size(); ++i) e.value.data[i] = rng.normal();
  }
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Var<double> eta = rw.weights(g, p, {3.7});
  CHECK(eta.val().size() == 1);
  CHECK(eta.val()[0] == doctest::Approx(1.0));
}

TEST_CASE("weighted shot combination") {
  Graph<double> g;
  Rng rng(13);

  // K=2, eta=(0.25, 0.75), psi=(4, 8) -> 7
  Var<double> eta = g.constant(Tensor<double>({2}, {0.25, 0.75}));
  Var<double> psi = lincomb<double>({g.constant(Tensor<double>::scalar(4.0)),
                                     g.constant(Tensor<double>::scalar(8.0))},
                                    eta);
  CHECK(psi.val()[0] == doctest::Approx(7.0));

  // identical shots: any convex combination equals a single shot
  Tensor<double> proto = random_features<double>({6}, rng);
  Var<double> combined = lincomb<double>({g.constant(proto), g.constant(proto)}, eta);
  for (int i = 0; i < 6; ++i) CHECK(combined.val()[i] == doctest::Approx(proto.data[i]));

  // one-hot eta selects a single shot
  Var<double> onehot = g.constant(Tensor<double>({2}, {0.0, 1.0}));
  Tensor<double> a = random_features<double>({6}, rng);
  Tensor<double> b = random_features<double>({6}, rng);
  Var<double> picked = lincomb<double>({g.constant(a), g.constant(b)}, onehot);
  for (int i = 0; i < 6; ++i) CHECK(picked.val()[i] == doctest::Approx(b.data[i]));
}
