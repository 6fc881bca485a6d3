#pragma once

#include <map>
#include <string>
#include <vector>

#include "bam/image_io.hpp"
#include "bam/rng.hpp"
#include "bam/shapes.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Base/novel class partition for one cross-validation fold. Class id 0 is
/// background and belongs to neither set.
struct ClassSplit {
  int fold_index = 0;
  int num_folds = 4;
  std::vector<int> base_classes;   // sorted
  std::vector<int> novel_classes;  // sorted, contiguous block
};

/// Split `total_classes` foreground classes into folds; the novel block of
/// fold i is the contiguous id range [i*T/F+1, (i+1)*T/F]. Refuses class
/// counts that do not divide evenly.
ClassSplit split_folds(int total_classes, int fold_index, int num_folds);

/// One few-shot task.
struct Episode {
  std::vector<RgbImage> support_images;
  std::vector<LabelMap> support_masks;  // binarized to class_id
  RgbImage query_image;
  LabelMap query_mask;      // binarized to class_id
  LabelMap query_semantic;  // full index mask, kept for generalized evaluation
  int class_id = 0;
  int shot_count = 0;
};

/// In-memory image collection with a per-class presence index.
struct Dataset {
  std::vector<RgbImage> images;
  std::vector<LabelMap> masks;
  int num_classes = 0;                               // foreground classes
  std::map<int, std::vector<int>> class_to_images;   // class id -> image indices

  void rebuild_index();

  static Dataset generate(const SceneSpec& spec, int num_images, std::uint64_t seed);

  /// Directory layout: root/images/NNNNN.png, root/masks/NNNNN.png,
  /// root/folds.json.
  static Dataset load(const std::string& root);
  void save(const std::string& root, int num_folds) const;
};

/// Draw one episode: a class from the pool, then K support images and one
/// query without replacement among images containing that class. Classes
/// with fewer than K+1 images are skipped; throws when every pool class is
/// exhausted. Pure function of (dataset, pool, shots, rng state).
Episode sample_episode(const Dataset& dataset, const std::vector<int>& class_pool,
                       int shots, Rng& rng);

/// Binary mask of one class.
LabelMap binarize(const LabelMap& semantic, int class_id);

/// Relabel for supervised base training: base ids densely renumbered to
/// 1..N_b in sorted order; novel-class pixels and background map to 0.
LabelMap remap_for_base_training(const LabelMap& semantic, const ClassSplit& split);

/// Fill the tight axis-aligned bounding box of the mask's foreground.
/// Throws on an empty mask.
LabelMap mask_to_bbox(const LabelMap& mask);

// Training-time augmentation (horizontal flip + random crop-and-resize).
void flip_horizontal(RgbImage& image, LabelMap& mask);
void random_crop_resize(RgbImage& image, LabelMap& mask, Rng& rng, double min_scale = 0.8);

}  // namespace bam
