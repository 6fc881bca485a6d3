#pragma once

#include <tuple>
#include <vector>

#include "bam/episodic.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Holistic segmentation output: 0 = background, 1 = the episode's novel
/// class, k >= 2 = base class with dense id k-1. The id table maps output
/// ids back to original class ids (table[0] = 0, table[1] = novel id,
/// table[k] = base id), avoiding the collision between the novel label and
/// base id 1.
struct GeneralizedMask {
  LabelMap labels;
  std::vector<int> id_table;

  LabelMap to_original_ids() const;
};

/// Final-prediction-primary merge: novel where the foreground probability
/// exceeds tau, else the base label where present, else background.
GeneralizedMask fuse_generalized(const Tensor<double>& fg_prob, const LabelMap& base_mask,
                                 double tau, const std::vector<int>& base_ids_sorted,
                                 int novel_class_id);

/// Base-mask-primary alternative: the base label wins wherever present;
/// novel only on base-background pixels above tau.
GeneralizedMask fuse_generalized_alt(const Tensor<double>& fg_prob, const LabelMap& base_mask,
                                     double tau, const std::vector<int>& base_ids_sorted,
                                     int novel_class_id);

/// mIoU over novel ids, base ids, and their union (background excluded from
/// all three). Predictions and ground truth are compared in original id
/// space; throws when a prediction lacks its id table.
std::tuple<double, double, double> generalized_miou(
    const std::vector<GeneralizedMask>& preds, const std::vector<LabelMap>& gts_original,
    const ClassSplit& split);

}  // namespace bam
