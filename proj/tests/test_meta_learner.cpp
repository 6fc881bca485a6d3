#include "doctest.h"

#include <cmath>

#include "bam/meta_learner.hpp"

using namespace bam;

namespace {

template <typename S>
Tensor<S> random_features(std::vector<int> shape, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(rng.normal());
  return t;
}

/// Explicit double-loop oracle for the masked spatial average, with the
/// mask already at feature resolution.
template <typename S>
std::vector<S> map_oracle(const Tensor<S>& f, const Tensor<S>& weights, S eps) {
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  S denom = eps;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) denom += weights.at(y, x);
  std::vector<S> out(static_cast<std::size_t>(c), S(0));
  for (int ci = 0; ci < c; ++ci) {
    S acc = S(0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc += f.at(ci, y, x) * weights.at(y, x);
    out[static_cast<std::size_t>(ci)] = acc / denom;
  }
  return out;
}

MetaLearner<double>::Config tiny_meta_config() {
  MetaLearner<double>::Config cfg;
  cfg.b2_channels = 4;
  cfg.b3_channels = 4;
  cfg.reduce_channels = 8;
  cfg.width = 8;
  cfg.aspp_dilations = {1, 2};
  cfg.norm_groups = 2;
  return cfg;
}

}  // namespace

TEST_CASE("reduce produces the configured channel count with shared weights") {
  ParamStore<float> ps;
  Rng rng(1);
  MetaLearner<float>::Config cfg;
  cfg.b2_channels = 32;
  cfg.b3_channels = 64;
  cfg.reduce_channels = 256;
  MetaLearner<float> meta(ps, cfg, rng);
  Graph<float> g;
  ParamUser<float> p(g, ps);
  Rng data_rng(2);
  Tensor<float> b2 = random_features<float>({32, 6, 6}, data_rng);
  Tensor<float> b3 = random_features<float>({64, 6, 6}, data_rng);
  Var<float> f1 = meta.reduce(p, g.constant(b2), g.constant(b3));
  CHECK(f1.val().shape == std::vector<int>{256, 6, 6});
  // identical inputs -> identical outputs through the shared 1x1 weights
  Var<float> f2 = meta.reduce(p, g.constant(b2), g.constant(b3));
  CHECK((f1.val().data == f2.val().data).all());

  // spatially misaligned taps are refused
  Tensor<float> b3_bad = random_features<float>({64, 3, 3}, data_rng);
  CHECK_THROWS(meta.reduce(p, g.constant(b2), g.constant(b3_bad)));

  // desk-scale channel count stays configurable
  ParamStore<float> ps2;
  MetaLearner<float>::Config cfg2 = cfg;
  cfg2.reduce_channels = 64;
  MetaLearner<float> meta2(ps2, cfg2, rng);
  Graph<float> g2;
  ParamUser<float> p2(g2, ps2);
  CHECK(meta2.reduce(p2, g2.constant(b2), g2.constant(b3)).val().dim(0) == 64);
}

TEST_CASE("masked average pooling matches the explicit oracle") {
  Graph<double> g;

  // 2x2 toy: f = [[1,2],[3,4]], top-row mask -> (1+2)/2 = 1.5
  Tensor<double> f({1, 2, 2}, {1, 2, 3, 4});
  LabelMap mask(2, 2);
  mask.at(0, 0) = 1;
  mask.at(0, 1) = 1;
  PrototypeResult<double> r = masked_average_pooling(g.constant(f), mask);
  CHECK_FALSE(r.fallback_used);
  CHECK(r.vector.val()[0] == doctest::Approx(1.5).epsilon(1e-4));

  // all-ones mask -> per-channel global mean
  Rng rng(3);
  Tensor<double> f2 = random_features<double>({3, 4, 4}, rng);
  LabelMap ones(4, 4);
  for (auto& v : ones.labels) v = 1;
  PrototypeResult<double> r2 = masked_average_pooling(g.constant(f2), ones);
  for (int c = 0; c < 3; ++c) {
    const double mean = f2.data.segment(c * 16, 16).mean();
    CHECK(r2.vector.val()[c] == doctest::Approx(mean).epsilon(1e-4));
  }

  // single-pixel mask -> that pixel's feature vector
  LabelMap single(4, 4);
  single.at(2, 1) = 1;
  PrototypeResult<double> r3 = masked_average_pooling(g.constant(f2), single);
  for (int c = 0; c < 3; ++c)
    CHECK(r3.vector.val()[c] == doctest::Approx(f2.at(c, 2, 1)).epsilon(1e-4));

  // random instances against the double-loop oracle (mask already at
  // feature resolution so no interpolation enters the comparison)
  for (int trial = 0; trial < 25; ++trial) {
    Tensor<double> ft = random_features<double>({4, 5, 5}, rng);
    LabelMap m(5, 5);
    bool any = false;
    for (auto& v : m.labels) {
      v = rng.bernoulli(0.4) ? 1 : 0;
      any |= v != 0;
    }
    if (!any) m.at(0, 0) = 1;
    Tensor<double> weights({5, 5});
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      weights.data[static_cast<std::int64_t>(i)] = m.labels[i];
    auto expect = map_oracle(ft, weights, 1e-5);
    PrototypeResult<double> rt = masked_average_pooling(g.constant(ft), m);
    for (int c = 0; c < 4; ++c)
      CHECK(rt.vector.val()[c] ==
            doctest::Approx(expect[static_cast<std::size_t>(c)]).epsilon(1e-6));
  }
}

TEST_CASE("masked average pooling is permutation-equivariant") {
  Rng rng(5);
  Graph<double> g;
  Tensor<double> f = random_features<double>({3, 4, 4}, rng);
  LabelMap mask(4, 4);
  for (auto& v : mask.labels) v = rng.bernoulli(0.5) ? 1 : 0;
  mask.at(1, 1) = 1;

  // drive a random spatial permutation applied to f and mask together
  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int i = 15; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  Tensor<double> fp({3, 4, 4});
  LabelMap mp(4, 4);
  for (int i = 0; i < 16; ++i) {
    mp.labels[static_cast<std::size_t>(i)] = mask.labels[static_cast<std::size_t>(perm[i])];
    for (int c = 0; c < 3; ++c)
      fp.data[c * 16 + i] = f.data[c * 16 + perm[static_cast<std::size_t>(i)]];
  }
  PrototypeResult<double> a = masked_average_pooling(g.constant(f), mask);
  PrototypeResult<double> b = masked_average_pooling(g.constant(fp), mp);
  for (int c = 0; c < 3; ++c)
    CHECK(a.vector.val()[c] == doctest::Approx(b.vector.val()[c]).epsilon(1e-12));
}

TEST_CASE("empty downsampled mask falls back to the strongest location") {
  Graph<double> g;
  Rng rng(6);
  Tensor<double> f = random_features<double>({2, 2, 2}, rng);
  // One lit pixel in a large mask vanishes under 8x downsampling + 0.5
  // threshold; the fallback must keep the strongest interpolated location
  // instead of dividing by ~0.
  LabelMap mask(16, 16);
  mask.at(5, 9) = 1;
  PrototypeResult<double> r = masked_average_pooling(g.constant(f), mask);
  CHECK(r.fallback_used);
  CHECK(r.vector.val().all_finite());
  // prototype equals one of the four pixel feature vectors
  bool matches_one = false;
  for (int y = 0; y < 2 && !matches_one; ++y)
    for (int x = 0; x < 2 && !matches_one; ++x)
      matches_one = std::abs(r.vector.val()[0] - f.at(0, y, x)) < 1e-4 &&
                    std::abs(r.vector.val()[1] - f.at(1, y, x)) < 1e-4;
  CHECK(matches_one);
}

TEST_CASE("prior map normalizes to [0,1] and handles edge cases") {
  Rng rng(7);
  Tensor<double> b4 = random_features<double>({8, 4, 4}, rng);

  // query == support with a partial mask: masked pixels match themselves
  // (cosine 1), so the non-constant map spans [0, 1] after min-max
  LabelMap partial(4, 4);
  partial.at(0, 0) = 1;
  partial.at(1, 2) = 1;
  Tensor<double> prior = prior_map(b4, b4, partial);
  CHECK(prior.data.maxCoeff() == doctest::Approx(1.0));
  CHECK(prior.data.minCoeff() == doctest::Approx(0.0));
  for (std::int64_t i = 0; i < prior.size(); ++i) {
    CHECK(prior.data[i] >= 0.0);
    CHECK(prior.data[i] <= 1.0);
  }

  // full self-match mask makes the pre-normalized map constant 1; the
  // degenerate span collapses to zeros rather than dividing by ~0
  LabelMap full(4, 4);
  for (auto& v : full.labels) v = 1;
  Tensor<double> degenerate = prior_map(b4, b4, full);
  CHECK(degenerate.data.abs().maxCoeff() == 0.0);

  // empty masked support region -> all-zero prior
  LabelMap empty(4, 4);
  Tensor<double> zero_prior = prior_map(b4, b4, empty);
  CHECK(zero_prior.data.abs().maxCoeff() == 0.0);

  // orthogonal features give cosine 0 before normalization
  Tensor<double> es({2, 1, 1}, {1.0, 0.0});
  Tensor<double> eq({2, 1, 1}, {0.0, 1.0});
  LabelMap one_px(1, 1);
  one_px.at(0, 0) = 1;
  Tensor<double> orto = prior_map(es, eq, one_px);
  // single-pixel map is constant; min-max collapses it to zero
  CHECK(orto.data[0] == doctest::Approx(0.0));
}

TEST_CASE("two-pixel prior min-max example") {
  // Build support/query features whose cosine similarities to the single
  // masked support pixel are 0.2 and 0.8, then check the min-max output.
  Tensor<double> support({2, 1, 1}, {1.0, 0.0});
  LabelMap mask(1, 1);
  mask.at(0, 0) = 1;
  const double a1 = std::acos(0.2), a2 = std::acos(0.8);
  Tensor<double> query({2, 1, 2});
  query.at(0, 0, 0) = std::cos(a1);
  query.at(1, 0, 0) = std::sin(a1);
  query.at(0, 0, 1) = std::cos(a2);
  query.at(1, 0, 1) = std::sin(a2);
  Tensor<double> prior = prior_map(support, query, mask);
  CHECK(prior.at(0, 0, 0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(prior.at(0, 0, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("meta forward emits a softmax pair and supports both prior wirings") {
  Rng rng(8);
  Rng data_rng(9);
  Tensor<double> fq = random_features<double>({8, 4, 4}, data_rng);
  Tensor<double> proto = random_features<double>({8}, data_rng);
  Tensor<double> prior({1, 4, 4});
  for (std::int64_t i = 0; i < prior.size(); ++i) prior.data[i] = data_rng.uniform();

  for (PriorWiring wiring : {PriorWiring::kGuidance, PriorWiring::kPostAspp}) {
    ParamStore<double> ps;
    MetaLearner<double>::Config cfg = tiny_meta_config();
    cfg.prior_wiring = wiring;
    MetaLearner<double> meta(ps, cfg, rng);
    Graph<double> g;
    ParamUser<double> p(g, ps);
    Var<double> prob = meta.forward_prob(p, g.constant(proto), g.constant(fq),
                                         g.constant(prior), 8, 8);
    CHECK(prob.val().shape == std::vector<int>{2, 8, 8});
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(prob.val().at(0, y, x) + prob.val().at(1, y, x) == doctest::Approx(1.0));
  }

  // prior off changes only the decoder input width, not the output shape
  ParamStore<double> ps2;
  MetaLearner<double>::Config cfg2 = tiny_meta_config();
  cfg2.prior_enabled = false;
  MetaLearner<double> meta2(ps2, cfg2, rng);
  Graph<double> g2;
  ParamUser<double> p2(g2, ps2);
  Var<double> prob2 = meta2.forward_prob(p2, g2.constant(proto), g2.constant(fq),
                                         std::nullopt, 8, 8);
  CHECK(prob2.val().shape == std::vector<int>{2, 8, 8});
}

TEST_CASE("zero-init classifier yields the (0.5, 0.5) map") {
  Rng rng(10);
  ParamStore<double> ps;
  MetaLearner<double> meta(ps, tiny_meta_config(), rng);
  ps.entry(ps.find("meta/dm/classifier/w")).value.data.setZero();
  ps.entry(ps.find("meta/dm/classifier/b")).value.data.setZero();
  Graph<double> g;
  ParamUser<double> p(g, ps);
  Rng data_rng(11);
  Var<double> prob = meta.forward_prob(p, g.constant(random_features<double>({8}, data_rng)),
                                       g.constant(random_features<double>({8, 4, 4}, data_rng)),
                                       g.constant(Tensor<double>({1, 4, 4})), 8, 8);
  for (std::int64_t i = 0; i < prob.val().size(); ++i)
    CHECK(prob.val().data[i] == doctest::Approx(0.5));
}

TEST_CASE("meta_loss hand values and binary validation") {
  Graph<double> g;
  // p1 = 0.5 everywhere -> ln 2
  Tensor<double> half = Tensor<double>::full({2, 2, 2}, 0.5);
  LabelMap gt(2, 2);
  gt.at(0, 0) = 1;
  CHECK(meta_loss(g.constant(half), gt).val()[0] == doctest::Approx(std::log(2.0)));

  // 1 pixel, gt = 1, p1 = 0.25 -> ln 4
  Tensor<double> quarter({2, 1, 1}, {0.75, 0.25});
  LabelMap one(1, 1);
  one.at(0, 0) = 1;
  CHECK(meta_loss(g.constant(quarter), one).val()[0] == doctest::Approx(std::log(4.0)));

  // perfect prediction -> ~0
  Tensor<double> perfect({2, 1, 1}, {0.0, 1.0});
  CHECK(meta_loss(g.constant(perfect), one).val()[0] <= 1e-6);

  // non-binary gt is refused
  LabelMap bad(1, 1);
  bad.at(0, 0) = 2;
  CHECK_THROWS(meta_loss(g.constant(quarter), bad));
}

TEST_CASE("meta loss gradients match finite differences end to end") {
  Rng rng(12);
  ParamStore<double> ps;
  MetaLearner<double> meta(ps, tiny_meta_config(), rng);
  Rng data_rng(13);
  Tensor<double> b2 = random_features<double>({4, 4, 4}, data_rng);
  Tensor<double> b3 = random_features<double>({4, 4, 4}, data_rng);
  Tensor<double> b2s = random_features<double>({4, 4, 4}, data_rng);
  Tensor<double> b3s = random_features<double>({4, 4, 4}, data_rng);
  Tensor<double> prior({1, 4, 4});
  for (std::int64_t i = 0; i < prior.size(); ++i) prior.data[i] = data_rng.uniform();
  LabelMap smask(8, 8), gt(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      smask.at(y, x) = x < 4 ? 1 : 0;
      gt.at(y, x) = y < 4 ? 1 : 0;
    }

  auto build = [&](Graph<double>& g, ParamUser<double>& p) {
    Var<double> fs = meta.reduce(p, g.constant(b2s), g.constant(b3s));
    Var<double> fq = meta.reduce(p, g.constant(b2), g.constant(b3));
    PrototypeResult<double> proto = masked_average_pooling(fs, smask);
    Var<double> prob = meta.forward_prob(p, proto.vector, fq, g.constant(prior), 8, 8);
    return meta_loss(prob, gt);
  };
  auto loss_value = [&] {
    Graph<double> g;
    ParamUser<double> p(g, ps);
    return build(g, p).val()[0];
  };
  Grads<double> grads = ps.make_grads();
  {
    Graph<double> g;
    ParamUser<double> p(g, ps);
    g.backward(build(g, p), &grads);
  }

  const double eps = 1e-5;
  double max_rel = 0.0;
  Rng pick(14);
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    auto& entry = ps.entry(static_cast<int>(pi));
    if (grads.slots[pi].size() == 0) continue;
    for (int trial = 0; trial < 2; ++trial) {
      const std::int64_t j = pick.uniform_int(0, entry.value.size() - 1);
      const double orig = entry.value.data[j];
      entry.value.data[j] = orig + eps;
      const double lp = loss_value();
      entry.value.data[j] = orig - eps;
      const double lm = loss_value();
      entry.value.data[j] = orig;
      const double numeric = (lp - lm) / (2 * eps);
      const double analytic = grads.slots[pi].data[j];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
    }
  }
  CHECK(max_rel < 1e-4);
}
