#include "bam/metrics.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bam {

namespace {

void check_shapes(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("iou: shape mismatch");
}

}  // namespace

void IouAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  std::set<int> present;
  for (std::int32_t v : pred.labels) present.insert(v);
  for (std::int32_t v : gt.labels) present.insert(v);
  std::map<int, Counts> local;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::int32_t p = pred.labels[i], g = gt.labels[i];
    if (p == g) {
      ++local[p].intersection;
      ++local[p].uni;
    } else {
      ++local[p].uni;
      ++local[g].uni;
    }
  }
  for (auto& [cls, c] : local) {
    auto& dst = counts_[cls];
    dst.intersection += c.intersection;
    dst.uni += c.uni;
    if (mode_ == Mode::kPerImage && c.uni > 0) {
      dst.iou_sum += static_cast<double>(c.intersection) / static_cast<double>(c.uni);
      ++dst.image_count;
    }
  }
}

void IouAccumulator::add_binary(const LabelMap& pred, const LabelMap& gt, int class_id) {
  check_shapes(pred, gt);
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
    if (p && g) ++inter;
    if (p || g) ++uni;
  }
  auto& dst = counts_[class_id];
  dst.intersection += inter;
  dst.uni += uni;
  if (mode_ == Mode::kPerImage && uni > 0) {
    dst.iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++dst.image_count;
  }
}

void IouAccumulator::merge(const IouAccumulator& other) {
  for (const auto& [cls, c] : other.counts_) {
    auto& dst = counts_[cls];
    dst.intersection += c.intersection;
    dst.uni += c.uni;
    dst.iou_sum += c.iou_sum;
    dst.image_count += c.image_count;
  }
}

std::map<int, double> IouAccumulator::per_class() const {
  std::map<int, double> out;
  for (const auto& [cls, c] : counts_) {
    if (mode_ == Mode::kPerImage) {
      if (c.image_count > 0) out[cls] = c.iou_sum / static_cast<double>(c.image_count);
    } else if (c.uni > 0) {
      out[cls] = static_cast<double>(c.intersection) / static_cast<double>(c.uni);
    }
  }
  return out;
}

double IouAccumulator::mean_iou(const std::vector<int>& class_filter) const {
  const auto ious = per_class();
  double sum = 0.0;
  int n = 0;
  if (class_filter.empty()) {
    for (const auto& [cls, iou] : ious) {
      if (cls == 0) continue;  // background excluded
      sum += iou;
      ++n;
    }
  } else {
    for (int cls : class_filter) {
      auto it = ious.find(cls);
      if (it == ious.end()) continue;
      sum += it->second;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

void FbIouAccumulator::add(const LabelMap& pred_binary, const LabelMap& gt_binary) {
  check_shapes(pred_binary, gt_binary);
  for (std::size_t i = 0; i < gt_binary.labels.size(); ++i) {
    const bool p = pred_binary.labels[i] != 0, g = gt_binary.labels[i] != 0;
    if (p && g) ++i_fg_;
    if (p || g) ++u_fg_;
    if (!p && !g) ++i_bg_;
    if (!p || !g) ++u_bg_;
  }
}

void FbIouAccumulator::merge(const FbIouAccumulator& other) {
  i_fg_ += other.i_fg_;
  u_fg_ += other.u_fg_;
  i_bg_ += other.i_bg_;
  u_bg_ += other.u_bg_;
}

double FbIouAccumulator::value() const {
  const double fg = u_fg_ > 0 ? static_cast<double>(i_fg_) / static_cast<double>(u_fg_) : 0.0;
  const double bg = u_bg_ > 0 ? static_cast<double>(i_bg_) / static_cast<double>(u_bg_) : 0.0;
  return 0.5 * (fg + bg);
}

std::uint64_t gram_flops(std::uint64_t channels, std::uint64_t height, std::uint64_t width) {
  if (channels == 0 || height == 0 || width == 0)
    throw std::invalid_argument("gram_flops: dimensions must be positive");
  return channels * channels * (4 * height * width + 3);
}

std::string flops_display(std::uint64_t flops) {
  std::ostringstream out;
  const double g = static_cast<double>(flops) / 1e9;
  if (g >= 0.995) {
    out.precision(2);
    out << std::fixed << g << "G";
  } else {
    out.precision(2);
    out << std::fixed << (static_cast<double>(flops) / 1e6) << "M";
  }
  return out.str();
}

}  // namespace bam
