#include "doctest.h"

#include <algorithm>
#include <vector>

#include "bam/metrics.hpp"
#include "bam/rng.hpp"

using namespace bam;

namespace {

/// Independent pixel-count oracle for binary IoU.
double binary_iou_oracle(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < preds.size(); ++k)
    for (std::size_t i = 0; i < preds[k].labels.size(); ++i) {
      const bool p = preds[k].labels[i] != 0, g = gts[k].labels[i] != 0;
      inter += (p && g);
      uni += (p || g);
    }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Independent oracle for FB-IoU over a set of binary maps.
double fb_iou_oracle(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts) {
  std::int64_t ifg = 0, ufg = 0, ibg = 0, ubg = 0;
  for (std::size_t k = 0; k < preds.size(); ++k)
    for (std::size_t i = 0; i < preds[k].labels.size(); ++i) {
      const bool p = preds[k].labels[i] != 0, g = gts[k].labels[i] != 0;
      ifg += (p && g);
      ufg += (p || g);
      ibg += (!p && !g);
      ubg += (!p || !g);
    }
  const double fg = ufg ? static_cast<double>(ifg) / ufg : 0.0;
  const double bg = ubg ? static_cast<double>(ibg) / ubg : 0.0;
  return 0.5 * (fg + bg);
}

LabelMap random_binary(int h, int w, Rng& rng, double p = 0.4) {
  LabelMap m(h, w);
  for (auto& v : m.labels) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("per-class IoU tallies match hand counts") {
  // 2x2 toy: gt has class 1 on 3 pixels, pred covers 2 of them. I=2, U=3.
  LabelMap gt(2, 2), pred(2, 2);
  gt.at(0, 0) = 1;
  gt.at(0, 1) = 1;
  gt.at(1, 0) = 1;
  pred.at(0, 0) = 1;
  pred.at(0, 1) = 1;
  IouAccumulator acc;
  acc.add(pred, gt);
  CHECK(acc.per_class().at(1) == doctest::Approx(2.0 / 3.0));

  IouAccumulator perfect;
  perfect.add(gt, gt);
  for (const auto& [cls, iou] : perfect.per_class()) {
    (void)cls;
    CHECK(iou == doctest::Approx(1.0));
  }

  // fully disjoint prediction for class 2
  LabelMap g2(2, 2), p2(2, 2);
  g2.at(0, 0) = 2;
  p2.at(1, 1) = 2;
  IouAccumulator disjoint;
  disjoint.add(p2, g2);
  CHECK(disjoint.per_class().at(2) == doctest::Approx(0.0));
}

TEST_CASE("accumulation is order-independent") {
  Rng rng(42);
  std::vector<LabelMap> preds, gts;
  for (int k = 0; k < 12; ++k) {
    preds.push_back(random_binary(6, 6, rng));
    gts.push_back(random_binary(6, 6, rng));
  }
  IouAccumulator forward;
  for (std::size_t k = 0; k < preds.size(); ++k) forward.add_binary(preds[k], gts[k], 3);
  IouAccumulator reversed;
  for (std::size_t k = preds.size(); k-- > 0;) reversed.add_binary(preds[k], gts[k], 3);
  CHECK(forward.per_class().at(3) == reversed.per_class().at(3));
  CHECK(forward.per_class().at(3) == doctest::Approx(binary_iou_oracle(preds, gts)));

  // mergeable monoid: split accumulation equals pooled accumulation
  IouAccumulator left, right;
  for (std::size_t k = 0; k < 6; ++k) left.add_binary(preds[k], gts[k], 3);
  for (std::size_t k = 6; k < preds.size(); ++k) right.add_binary(preds[k], gts[k], 3);
  left.merge(right);
  CHECK(left.per_class().at(3) == forward.per_class().at(3));
}

TEST_CASE("fb_iou matches the pixel-count oracle") {
  LabelMap gt(4, 4), pred(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) gt.at(y, x) = (y < 2) ? 1 : 0;  // half foreground

  SUBCASE("perfect prediction scores 1") {
    FbIouAccumulator acc;
    acc.add(gt, gt);
    CHECK(acc.value() == doctest::Approx(1.0));
  }
  SUBCASE("all-background prediction on a half-foreground gt") {
    FbIouAccumulator acc;
    acc.add(pred, gt);  // pred is all zeros
    const double expect = fb_iou_oracle({pred}, {gt});
    CHECK(acc.value() == doctest::Approx(expect));
    // frozen oracle value: fg IoU 0, bg IoU 1/2 -> 0.25
    CHECK(acc.value() == doctest::Approx(0.25));
  }
  SUBCASE("complement prediction scores 0") {
    LabelMap comp(4, 4);
    for (std::size_t i = 0; i < comp.labels.size(); ++i) comp.labels[i] = 1 - gt.labels[i];
    FbIouAccumulator acc;
    acc.add(comp, gt);
    CHECK(acc.value() == doctest::Approx(0.0));
  }
  SUBCASE("random maps agree with the oracle") {
    Rng rng(7);
    std::vector<LabelMap> preds, gts;
    FbIouAccumulator acc;
    for (int k = 0; k < 10; ++k) {
      preds.push_back(random_binary(5, 7, rng));
      gts.push_back(random_binary(5, 7, rng));
      acc.add(preds.back(), gts.back());
    }
    CHECK(acc.value() == doctest::Approx(fb_iou_oracle(preds, gts)));
  }
}

TEST_CASE("mean IoU excludes background and absent classes") {
  LabelMap gt(2, 2), pred(2, 2);
  gt.at(0, 0) = 1;
  gt.at(0, 1) = 2;
  pred.at(0, 0) = 1;
  pred.at(0, 1) = 1;
  IouAccumulator acc;
  acc.add(pred, gt);
  // class 1: I=1 U=2 -> 0.5 ; class 2: I=0 U=1 -> 0 ; class 5 absent
  CHECK(acc.mean_iou() == doctest::Approx(0.25));
  CHECK(acc.mean_iou({1}) == doctest::Approx(0.5));
  CHECK(acc.mean_iou({5}) == doctest::Approx(0.0));
}

TEST_CASE("per-image averaging mode differs from dataset pooling as expected") {
  // Image A: class 1, I=1 U=1 (IoU 1). Image B: class 1, I=1 U=3 (IoU 1/3).
  LabelMap a_pred(1, 1), a_gt(1, 1);
  a_pred.at(0, 0) = 1;
  a_gt.at(0, 0) = 1;
  LabelMap b_pred(1, 3), b_gt(1, 3);
  b_pred.at(0, 0) = 1;
  b_pred.at(0, 1) = 1;
  b_gt.at(0, 1) = 1;
  b_gt.at(0, 2) = 1;

  IouAccumulator pooled(IouAccumulator::Mode::kDatasetPooled);
  pooled.add_binary(a_pred, a_gt, 1);
  pooled.add_binary(b_pred, b_gt, 1);
  // pooled: I = 1+1 = 2, U = 1+3 = 4
  CHECK(pooled.per_class().at(1) == doctest::Approx(0.5));

  IouAccumulator per_image(IouAccumulator::Mode::kPerImage);
  per_image.add_binary(a_pred, a_gt, 1);
  per_image.add_binary(b_pred, b_gt, 1);
  // per-image: mean(1, 1/3) = 2/3
  CHECK(per_image.per_class().at(1) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("gram_flops is exact integer arithmetic") {
  // 512^2 * (4*3600 + 3), displayed as the reported 3.78G
  CHECK(gram_flops(512, 60, 60) == 262144ull * 14403ull);
  CHECK(gram_flops(512, 60, 60) == 3775660032ull);
  CHECK(flops_display(gram_flops(512, 60, 60)) == "3.78G");
  CHECK(gram_flops(1, 1, 1) == 7ull);
  // doubling channels quadruples the count at fixed N
  CHECK(gram_flops(64, 13, 17) * 4 == gram_flops(128, 13, 17));
  CHECK_THROWS(gram_flops(0, 4, 4));
}
