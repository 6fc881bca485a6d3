#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "bam/nn.hpp"

namespace bam {

/// Four-block convolutional backbone with per-block taps. Block 3 keeps
/// stride 1 by default so the block-2 and block-3 maps stay spatially
/// aligned for concatenation in the prototype branch.
struct EncoderConfig {
  std::array<int, 4> widths = {16, 32, 64, 128};
  std::array<int, 4> strides = {2, 2, 1, 2};
  int norm_groups = 4;
};

template <typename S>
struct BlockFeatures {
  Var<S> b1, b2, b3, b4;

  Var<S> tap(int index) const {
    switch (index) {
      case 1: return b1;
      case 2: return b2;
      case 3: return b3;
      case 4: return b4;
    }
    throw std::invalid_argument("block tap must be 1..4");
  }
};

template <typename S>
class Encoder {
 public:
  Encoder(ParamStore<S>& params, const EncoderConfig& config, Rng& rng) : config_(config) {
    int in_ch = 3;
    for (int blk = 0; blk < 4; ++blk) {
      const int out_ch = config.widths[static_cast<std::size_t>(blk)];
      const std::string prefix = "encoder/b" + std::to_string(blk + 1);
      units_[static_cast<std::size_t>(2 * blk)] = ConvUnit<S>::create(
          params, prefix + "/conv0", in_ch, out_ch, 3,
          ConvSpec{config.strides[static_cast<std::size_t>(blk)], 1, 1}, rng,
          config.norm_groups);
      units_[static_cast<std::size_t>(2 * blk + 1)] = ConvUnit<S>::create(
          params, prefix + "/conv1", out_ch, out_ch, 3, ConvSpec{1, 1, 1}, rng,
          config.norm_groups);
      in_ch = out_ch;
    }
  }

  /// One pass producing all four taps. Inputs must be {3,H,W} with H,W >= 32
  /// and finite entries.
  BlockFeatures<S> forward(ParamUser<S>& p, Var<S> image) const {
    const auto& shape = image.val().shape;
    if (shape.size() != 3 || shape[0] != 3)
      throw std::invalid_argument("encoder: input must be {3,H,W}");
    if (shape[1] < 32 || shape[2] < 32)
      throw std::invalid_argument("encoder: input smaller than 32x32");
    if (!image.val().all_finite())
      throw std::invalid_argument("encoder: non-finite input");

    BlockFeatures<S> f;
    Var<S> x = image;
    for (int blk = 0; blk < 4; ++blk) {
      x = units_[static_cast<std::size_t>(2 * blk)].forward(p, x);
      x = units_[static_cast<std::size_t>(2 * blk + 1)].forward(p, x);
      switch (blk) {
        case 0: f.b1 = x; break;
        case 1: f.b2 = x; break;
        case 2: f.b3 = x; break;
        case 3: f.b4 = x; break;
      }
    }
    return f;
  }

  /// Freeze/unfreeze every encoder parameter; forward passes are unchanged.
  void set_frozen(ParamStore<S>& params, bool frozen) const {
    params.set_trainable_prefix("encoder/", !frozen);
  }

  const EncoderConfig& config() const { return config_; }

  int tap_channels(int index) const {
    if (index < 1 || index > 4) throw std::invalid_argument("block tap must be 1..4");
    return config_.widths[static_cast<std::size_t>(index - 1)];
  }

 private:
  EncoderConfig config_;
  std::array<ConvUnit<S>, 8> units_;
};

}  // namespace bam
