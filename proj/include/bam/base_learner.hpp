#pragma once

#include <string>
#include <vector>

#include "bam/encoder.hpp"
#include "bam/nn.hpp"

namespace bam {

/// Supervised multi-class segmentation head over the base classes: a conv
/// block on the deepest encoder tap, a pyramid-pooling decoder, and a
/// (1+N_b)-channel classifier with softmax output. It learns what the few-
/// shot branch should NOT segment.
template <typename S>
class BaseLearner {
 public:
  struct Config {
    int in_channels = 128;
    int num_base_classes = 0;
    int width = 64;
    std::vector<int> pool_sizes = {1, 2, 3, 6};
    int norm_groups = 4;
  };

  BaseLearner(ParamStore<S>& params, const Config& config, Rng& rng) : config_(config) {
    if (config.num_base_classes < 1)
      throw std::invalid_argument("base learner: needs at least one base class");
    const int d = config.width;
    conv0_ = ConvUnit<S>::create(params, "base/fconv/conv0", config.in_channels, d, 3,
                                 ConvSpec{1, 1, 1}, rng, config.norm_groups);
    conv1_ = ConvUnit<S>::create(params, "base/fconv/conv1", d, d, 3, ConvSpec{1, 1, 1}, rng,
                                 config.norm_groups);
    const int branch = d / static_cast<int>(config.pool_sizes.size());
    for (std::size_t i = 0; i < config.pool_sizes.size(); ++i)
      pool_convs_.push_back(ConvUnit<S>::create(params,
                                                "base/ppm/pool" +
                                                    std::to_string(config.pool_sizes[i]),
                                                d, branch, 1, ConvSpec{1, 0, 1}, rng,
                                                /*norm_groups=*/1));
    const int merged = d + branch * static_cast<int>(config.pool_sizes.size());
    merge_ = ConvUnit<S>::create(params, "base/ppm/merge", merged, d, 3, ConvSpec{1, 1, 1}, rng,
                                 config.norm_groups);
    classifier_ = ConvProj<S>::create(params, "base/classifier", d,
                                      1 + config.num_base_classes, 1, ConvSpec{1, 0, 1}, rng);
  }

  /// b4 tap -> pyramid-pooled logits -> bilinear upsample to the output size
  /// -> channel softmax. Every pixel's channel vector sums to 1.
  Var<S> forward_prob(ParamUser<S>& p, Var<S> b4, int out_h, int out_w) const {
    Var<S> f = conv1_.forward(p, conv0_.forward(p, b4));
    const int h = f.val().dim(1), w = f.val().dim(2);
    std::vector<Var<S>> parts = {f};
    for (std::size_t i = 0; i < config_.pool_sizes.size(); ++i) {
      const int s = config_.pool_sizes[i];
      Var<S> pooled = adaptive_avg_pool(f, s, s);
      pooled = pool_convs_[i].forward(p, pooled);
      parts.push_back(resize_bilinear(pooled, h, w));
    }
    Var<S> merged = merge_.forward(p, concat_channels(parts));
    Var<S> logits = classifier_.forward(p, merged);
    return softmax_channels(resize_bilinear(logits, out_h, out_w));
  }

  int num_base_classes() const { return config_.num_base_classes; }

 private:
  Config config_;
  ConvUnit<S> conv0_, conv1_;
  std::vector<ConvUnit<S>> pool_convs_;
  ConvUnit<S> merge_;
  ConvProj<S> classifier_;
};

/// Mean pixel cross-entropy against a dense label map in {0..N_b}. Labels
/// above the channel count are refused.
template <typename S>
Var<S> base_loss(Var<S> prob, const LabelMap& gt) {
  return cross_entropy_prob(prob, gt);
}

/// Task-relative background evidence: the summed foreground probability
/// p_b^f = sum_i p_b^i, pointwise equal to 1 - p_b^0.
template <typename S>
Var<S> aggregate_base_foreground(Var<S> prob) {
  const int c = prob.val().dim(0);
  if (c < 2) throw std::invalid_argument("aggregate: needs foreground channels");
  return sum_channels(slice_channels(prob, 1, c));
}

/// Per-pixel channel argmax; ties break toward the lowest channel index.
template <typename S>
LabelMap base_argmax_mask(const Tensor<S>& prob) {
  const int c = prob.dim(0), h = prob.dim(1), w = prob.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  LabelMap out(h, w);
  for (std::int64_t p = 0; p < plane; ++p) {
    int best = 0;
    S best_val = prob.data[p];
    for (int ci = 1; ci < c; ++ci) {
      const S v = prob.data[ci * plane + p];
      if (v > best_val) {
        best_val = v;
        best = ci;
      }
    }
    out.labels[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

}  // namespace bam
