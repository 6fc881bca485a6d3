#include "bam/generalized.hpp"

#include <stdexcept>

#include "bam/metrics.hpp"

namespace bam {

namespace {

std::vector<int> make_id_table(const std::vector<int>& base_ids_sorted, int novel_class_id) {
  std::vector<int> table;
  table.push_back(0);
  table.push_back(novel_class_id);
  for (int b : base_ids_sorted) table.push_back(b);
  return table;
}

void check_fusion_inputs(const Tensor<double>& fg_prob, const LabelMap& base_mask, double tau,
                         int num_base) {
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("fuse: tau must be in [0, 1]");
  const bool prob_2d = fg_prob.rank() == 2;
  const int h = prob_2d ? fg_prob.dim(0) : fg_prob.dim(1);
  const int w = prob_2d ? fg_prob.dim(1) : fg_prob.dim(2);
  if (!prob_2d && (fg_prob.rank() != 3 || fg_prob.dim(0) != 1))
    throw std::invalid_argument("fuse: foreground probability must be a single map");
  if (h != base_mask.height || w != base_mask.width)
    throw std::invalid_argument("fuse: shape mismatch");
  for (std::int32_t v : base_mask.labels)
    if (v < 0 || v > num_base) throw std::invalid_argument("fuse: base mask id out of range");
}

}  // namespace

LabelMap GeneralizedMask::to_original_ids() const {
  if (id_table.empty()) throw std::invalid_argument("generalized mask: missing id table");
  LabelMap out(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    out.labels[i] = id_table.at(static_cast<std::size_t>(labels.labels[i]));
  return out;
}

GeneralizedMask fuse_generalized(const Tensor<double>& fg_prob, const LabelMap& base_mask,
                                 double tau, const std::vector<int>& base_ids_sorted,
                                 int novel_class_id) {
  check_fusion_inputs(fg_prob, base_mask, tau, static_cast<int>(base_ids_sorted.size()));
  GeneralizedMask out;
  out.id_table = make_id_table(base_ids_sorted, novel_class_id);
  out.labels = LabelMap(base_mask.height, base_mask.width);
  for (std::size_t i = 0; i < base_mask.labels.size(); ++i) {
    const double p = fg_prob.data[static_cast<std::int64_t>(i)];
    const std::int32_t b = base_mask.labels[i];
    if (p > tau)
      out.labels.labels[i] = 1;
    else if (b != 0)
      out.labels.labels[i] = b + 1;
    else
      out.labels.labels[i] = 0;
  }
  return out;
}

GeneralizedMask fuse_generalized_alt(const Tensor<double>& fg_prob, const LabelMap& base_mask,
                                     double tau, const std::vector<int>& base_ids_sorted,
                                     int novel_class_id) {
  check_fusion_inputs(fg_prob, base_mask, tau, static_cast<int>(base_ids_sorted.size()));
  GeneralizedMask out;
  out.id_table = make_id_table(base_ids_sorted, novel_class_id);
  out.labels = LabelMap(base_mask.height, base_mask.width);
  for (std::size_t i = 0; i < base_mask.labels.size(); ++i) {
    const double p = fg_prob.data[static_cast<std::int64_t>(i)];
    const std::int32_t b = base_mask.labels[i];
    if (b != 0)
      out.labels.labels[i] = b + 1;
    else if (p > tau)
      out.labels.labels[i] = 1;
    else
      out.labels.labels[i] = 0;
  }
  return out;
}

std::tuple<double, double, double> generalized_miou(
    const std::vector<GeneralizedMask>& preds, const std::vector<LabelMap>& gts_original,
    const ClassSplit& split) {
  if (preds.size() != gts_original.size())
    throw std::invalid_argument("generalized_miou: prediction/gt count mismatch");
  IouAccumulator acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].id_table.empty())
      throw std::invalid_argument("generalized_miou: prediction missing id table");
    acc.add(preds[i].to_original_ids(), gts_original[i]);
  }
  const double miou_n = acc.mean_iou(split.novel_classes);
  const double miou_b = acc.mean_iou(split.base_classes);
  std::vector<int> all = split.novel_classes;
  all.insert(all.end(), split.base_classes.begin(), split.base_classes.end());
  const double miou_a = acc.mean_iou(all);
  return {miou_n, miou_b, miou_a};
}

}  // namespace bam
