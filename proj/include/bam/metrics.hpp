#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bam/episodic.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Dataset-pooled per-class intersection/union tallies. Counters are exact
/// integers; accumulators form a commutative monoid under merge, so episode
/// streams can be tallied in any order or in parallel and combined.
class IouAccumulator {
 public:
  /// Whether IoU is pooled over the dataset (benchmark convention) or
  /// averaged per image.
  enum class Mode { kDatasetPooled, kPerImage };

  explicit IouAccumulator(Mode mode = Mode::kDatasetPooled) : mode_(mode) {}

  /// Tally all classes present in either map.
  void add(const LabelMap& pred, const LabelMap& gt);

  /// Tally a binary episode prediction into one class slot.
  void add_binary(const LabelMap& pred, const LabelMap& gt, int class_id);

  void merge(const IouAccumulator& other);

  /// IoU per class with nonzero union; keys are class ids.
  std::map<int, double> per_class() const;

  /// Mean IoU over classes with nonzero union, excluding background. When
  /// `class_filter` is non-empty, only those ids enter the mean.
  double mean_iou(const std::vector<int>& class_filter = {}) const;

 private:
  struct Counts {
    std::int64_t intersection = 0;
    std::int64_t uni = 0;
    double iou_sum = 0.0;  // per-image mode
    std::int64_t image_count = 0;
  };
  Mode mode_;
  std::map<int, Counts> counts_;
};

/// Foreground-background IoU pooled over an evaluation set: the mean of the
/// foreground IoU and the background IoU.
class FbIouAccumulator {
 public:
  void add(const LabelMap& pred_binary, const LabelMap& gt_binary);
  void merge(const FbIouAccumulator& other);
  double value() const;

 private:
  std::int64_t i_fg_ = 0, u_fg_ = 0, i_bg_ = 0, u_bg_ = 0;
};

/// Fold-wise evaluation summary.
struct MetricsRecord {
  std::map<int, double> per_class_iou;
  double miou = 0.0;
  double fb_iou = 0.0;
  std::optional<double> miou_n, miou_b, miou_a;
  int fold = 0;
  std::uint64_t seed = 0;
  int episodes = 0;
  int map_fallbacks = 0;  // episodes whose downsampled support mask was empty
};

/// Operation count of the Gram-based scene-difference indicator for a
/// C x H x W feature map: C^2 * (4*H*W + 3), exact integer arithmetic.
std::uint64_t gram_flops(std::uint64_t channels, std::uint64_t height, std::uint64_t width);

/// "3.78G"-style display string.
std::string flops_display(std::uint64_t flops);

}  // namespace bam
