#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bam/encoder.hpp"
#include "bam/nn.hpp"

namespace bam {

/// Plain-tensor bilinear resize (same sampling as the graph op).
template <typename S>
Tensor<S> resize_bilinear_tensor(const Tensor<S>& x, int ho, int wo) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ay = detail::resize_axis(h, ho);
  const auto ax = detail::resize_axis(w, wo);
  Tensor<S> out({c, ho, wo});
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const S fy = static_cast<S>(ay.frac[static_cast<std::size_t>(oy)]);
        const S fx = static_cast<S>(ax.frac[static_cast<std::size_t>(ox)]);
        const int y0 = ay.lo[static_cast<std::size_t>(oy)], y1 = ay.hi[static_cast<std::size_t>(oy)];
        const int x0 = ax.lo[static_cast<std::size_t>(ox)], x1 = ax.hi[static_cast<std::size_t>(ox)];
        out.at(ci, oy, ox) = (S(1) - fy) * ((S(1) - fx) * x.at(ci, y0, x0) + fx * x.at(ci, y0, x1)) +
                             fy * ((S(1) - fx) * x.at(ci, y1, x0) + fx * x.at(ci, y1, x1));
      }
  return out;
}

/// Mask alignment to feature resolution: bilinear interpolation followed by
/// a 0.5 threshold. Returns {h,w} weights in {0,1} plus the pre-threshold
/// interpolated map.
template <typename S>
struct ResizedMask {
  Tensor<S> weights;       // {h,w} binary
  Tensor<S> interpolated;  // {h,w} in [0,1]
  bool empty = false;
};

template <typename S>
ResizedMask<S> resize_mask_to(const LabelMap& mask, int h, int w) {
  Tensor<S> m({1, mask.height, mask.width});
  for (std::size_t i = 0; i < mask.labels.size(); ++i)
    m.data[static_cast<std::int64_t>(i)] = mask.labels[i] != 0 ? S(1) : S(0);
  Tensor<S> interp = resize_bilinear_tensor(m, h, w);
  ResizedMask<S> out;
  out.interpolated = Tensor<S>({h, w});
  out.weights = Tensor<S>({h, w});
  out.interpolated.data = interp.data;
  out.weights.data = (interp.data > S(0.5)).template cast<S>();
  out.empty = out.weights.data.sum() == S(0);
  return out;
}

/// Prototype extraction: the masked spatial average of support features.
/// When the downsampled mask lands empty, the single highest-valued mask
/// location is kept instead of dividing by ~0; the fallback is reported so
/// episode logs can flag it.
template <typename S>
struct PrototypeResult {
  Var<S> vector;
  bool fallback_used = false;
};

template <typename S>
PrototypeResult<S> masked_average_pooling(Var<S> features, const LabelMap& mask,
                                          S eps = S(1e-5)) {
  const int h = features.val().dim(1), w = features.val().dim(2);
  ResizedMask<S> resized = resize_mask_to<S>(mask, h, w);
  PrototypeResult<S> out;
  if (resized.empty) {
    std::int64_t best = 0;
    resized.interpolated.data.maxCoeff(&best);
    resized.weights.data.setZero();
    resized.weights.data[best] = S(1);
    out.fallback_used = true;
  }
  out.vector = masked_average_pool(features, resized.weights, eps);
  return out;
}

/// Training-free correspondence prior: for every query location, the
/// maximum cosine similarity to any masked support location on the deepest
/// (frozen) tap, min-max normalized into [0,1]. An empty masked region
/// yields an all-zero prior.
template <typename S>
Tensor<S> prior_map(const Tensor<S>& b4_support, const Tensor<S>& b4_query,
                    const LabelMap& support_mask) {
  const int c = b4_support.dim(0), h = b4_support.dim(1), w = b4_support.dim(2);
  if (b4_query.dim(0) != c) throw std::invalid_argument("prior: channel mismatch");
  const int qh = b4_query.dim(1), qw = b4_query.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t qplane = static_cast<std::int64_t>(qh) * qw;

  ResizedMask<S> resized = resize_mask_to<S>(support_mask, h, w);
  Tensor<S> out({1, qh, qw});
  if (resized.empty) return out;

  std::vector<std::int64_t> fg;
  for (std::int64_t i = 0; i < plane; ++i)
    if (resized.weights.data[i] > S(0)) fg.push_back(i);

  auto norm_at = [&](const Tensor<S>& f, std::int64_t pix, std::int64_t pl) {
    S acc = S(0);
    for (int ci = 0; ci < c; ++ci) acc += f.data[ci * pl + pix] * f.data[ci * pl + pix];
    return std::sqrt(acc);
  };

  S lo = S(1), hi = S(-1);
  for (std::int64_t q = 0; q < qplane; ++q) {
    const S qn = norm_at(b4_query, q, qplane) + S(1e-12);
    S best = S(-1);
    for (std::int64_t s : fg) {
      S dot = S(0);
      for (int ci = 0; ci < c; ++ci)
        dot += b4_query.data[ci * qplane + q] * b4_support.data[ci * plane + s];
      const S sim = dot / (qn * (norm_at(b4_support, s, plane) + S(1e-12)));
      best = std::max(best, sim);
    }
    out.data[q] = best;
    lo = std::min(lo, best);
    hi = std::max(hi, best);
  }
  const S span = hi - lo;
  if (span > S(1e-12))
    out.data = (out.data - lo) / span;
  else
    out.data.setZero();
  return out;
}

enum class PriorWiring { kGuidance, kPostAspp };

/// Prototype-guided binary segmentation branch: a shared 1x1 reduction of
/// the concatenated mid-level taps, expand-and-concatenate guidance, an
/// ASPP context block, and a small conv head with 2-channel softmax output.
template <typename S>
class MetaLearner {
 public:
  struct Config {
    int b2_channels = 32;
    int b3_channels = 64;
    int reduce_channels = 256;
    int width = 64;
    std::vector<int> aspp_dilations = {1, 6, 12};
    int norm_groups = 4;
    bool prior_enabled = true;
    PriorWiring prior_wiring = PriorWiring::kGuidance;
  };

  MetaLearner(ParamStore<S>& params, const Config& config, Rng& rng) : config_(config) {
    reduce_ = ConvProj<S>::create(params, "meta/reduce", config.b2_channels + config.b3_channels,
                                  config.reduce_channels, 1, ConvSpec{1, 0, 1}, rng);
    const int guidance_ch = 2 * config.reduce_channels +
                            ((config.prior_enabled && config.prior_wiring == PriorWiring::kGuidance)
                                 ? 1
                                 : 0);
    const int d = config.width;
    for (int dil : config.aspp_dilations)
      aspp_branches_.push_back(ConvUnit<S>::create(params,
                                                   "meta/aspp/dil" + std::to_string(dil),
                                                   guidance_ch, d, 3, ConvSpec{1, dil, dil}, rng,
                                                   config.norm_groups));
    aspp_image_ = ConvUnit<S>::create(params, "meta/aspp/image", guidance_ch, d, 1,
                                      ConvSpec{1, 0, 1}, rng, /*norm_groups=*/1);
    const int naspp = static_cast<int>(config.aspp_dilations.size()) + 1;
    aspp_project_ = ConvUnit<S>::create(params, "meta/aspp/project", naspp * d, d, 1,
                                        ConvSpec{1, 0, 1}, rng, config.norm_groups);
    const int head_in = d + ((config.prior_enabled && config.prior_wiring == PriorWiring::kPostAspp)
                                 ? 1
                                 : 0);
    dm0_ = ConvUnit<S>::create(params, "meta/dm/conv0", head_in, d, 3, ConvSpec{1, 1, 1}, rng,
                               config.norm_groups);
    dm1_ = ConvUnit<S>::create(params, "meta/dm/conv1", d, d, 3, ConvSpec{1, 1, 1}, rng,
                               config.norm_groups);
    classifier_ = ConvProj<S>::create(params, "meta/dm/classifier", d, 2, 1, ConvSpec{1, 0, 1},
                                      rng);
  }

  /// Shared 1x1 reduction of spatially aligned block-2/block-3 taps; the
  /// same weights serve support and query.
  Var<S> reduce(ParamUser<S>& p, Var<S> b2, Var<S> b3) const {
    if (b2.val().dim(1) != b3.val().dim(1) || b2.val().dim(2) != b3.val().dim(2))
      throw std::invalid_argument("reduce: block-2/3 taps not spatially aligned");
    return relu(reduce_.forward(p, concat_channels<S>({b2, b3})));
  }

  /// Guidance + decode: expand the prototype over space, concatenate with
  /// the query features (and prior when wired here), run ASPP and the conv
  /// head, upsample to the output size, 2-channel softmax.
  Var<S> forward_prob(ParamUser<S>& p, Var<S> prototype, Var<S> query_features,
                      std::optional<Var<S>> prior, int out_h, int out_w) const {
    const int h = query_features.val().dim(1), w = query_features.val().dim(2);
    std::vector<Var<S>> guidance = {broadcast_to_map(prototype, h, w), query_features};
    if (config_.prior_enabled && config_.prior_wiring == PriorWiring::kGuidance) {
      if (!prior) throw std::invalid_argument("meta: prior enabled but not provided");
      guidance.push_back(resize_prior(*prior, h, w));
    }
    Var<S> x = concat_channels(guidance);

    std::vector<Var<S>> branches;
    for (const auto& branch : aspp_branches_) branches.push_back(branch.forward(p, x));
    Var<S> pooled = aspp_image_.forward(p, adaptive_avg_pool(x, 1, 1));
    branches.push_back(resize_bilinear(pooled, h, w));
    Var<S> ctx = aspp_project_.forward(p, concat_channels(branches));

    if (config_.prior_enabled && config_.prior_wiring == PriorWiring::kPostAspp) {
      if (!prior) throw std::invalid_argument("meta: prior enabled but not provided");
      ctx = concat_channels<S>({ctx, resize_prior(*prior, h, w)});
    }
    Var<S> y = dm1_.forward(p, dm0_.forward(p, ctx));
    Var<S> logits = classifier_.forward(p, y);
    return softmax_channels(resize_bilinear(logits, out_h, out_w));
  }

  const Config& config() const { return config_; }

 private:
  static Var<S> resize_prior(Var<S> prior, int h, int w) {
    if (prior.val().dim(1) == h && prior.val().dim(2) == w) return prior;
    return resize_bilinear(prior, h, w);
  }

  Config config_;
  ConvProj<S> reduce_;
  std::vector<ConvUnit<S>> aspp_branches_;
  ConvUnit<S> aspp_image_;
  ConvUnit<S> aspp_project_;
  ConvUnit<S> dm0_, dm1_;
  ConvProj<S> classifier_;
};

/// Mean binary cross-entropy of the foreground channel against a binary
/// ground-truth mask.
template <typename S>
Var<S> meta_loss(Var<S> prob2, const LabelMap& gt) {
  if (prob2.val().dim(0) != 2) throw std::invalid_argument("meta_loss: 2-channel map expected");
  return binary_cross_entropy_prob(slice_channels(prob2, 1, 2), gt);
}

}  // namespace bam
