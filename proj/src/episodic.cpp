#include "bam/episodic.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace bam {

namespace fs = std::filesystem;
using nlohmann::json;

ClassSplit split_folds(int total_classes, int fold_index, int num_folds) {
  if (num_folds < 1) throw std::invalid_argument("split_folds: num_folds must be >= 1");
  if (fold_index < 0 || fold_index >= num_folds)
    throw std::invalid_argument("split_folds: fold_index out of range");
  if (total_classes <= 0 || total_classes % num_folds != 0)
    throw std::invalid_argument("split_folds: total_classes must divide evenly into folds");

  const int per_fold = total_classes / num_folds;
  ClassSplit split;
  split.fold_index = fold_index;
  split.num_folds = num_folds;
  const int novel_lo = fold_index * per_fold + 1;
  const int novel_hi = (fold_index + 1) * per_fold;  // inclusive
  for (int c = 1; c <= total_classes; ++c) {
    if (c >= novel_lo && c <= novel_hi)
      split.novel_classes.push_back(c);
    else
      split.base_classes.push_back(c);
  }
  return split;
}

void Dataset::rebuild_index() {
  class_to_images.clear();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    std::vector<bool> seen(static_cast<std::size_t>(num_classes) + 1, false);
    for (std::int32_t v : masks[i].labels) {
      if (v > 0 && v <= num_classes && !seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = true;
        class_to_images[v].push_back(static_cast<int>(i));
      }
    }
  }
}

Dataset Dataset::generate(const SceneSpec& spec, int num_images, std::uint64_t seed) {
  Dataset ds;
  ds.num_classes = static_cast<int>(spec.shape_classes.size());
  Rng master(seed != 0 ? seed : spec.rng_seed);
  for (int i = 0; i < num_images; ++i) {
    Rng scene_rng = master.fork(static_cast<std::uint64_t>(i));
    Scene scene = generate_scene(spec, scene_rng);
    ds.images.push_back(std::move(scene.image));
    ds.masks.push_back(std::move(scene.mask));
  }
  ds.rebuild_index();
  return ds;
}

void Dataset::save(const std::string& root, int num_folds) const {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  char name[32];
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::snprintf(name, sizeof(name), "%05zu.png", i);
    write_png_rgb((fs::path(root) / "images" / name).string(), images[i]);
    write_png_index((fs::path(root) / "masks" / name).string(), masks[i]);
  }
  json folds = json::object();
  folds["num_classes"] = num_classes;
  folds["num_folds"] = num_folds;
  json list = json::array();
  for (int f = 0; f < num_folds; ++f) {
    ClassSplit s = split_folds(num_classes, f, num_folds);
    list.push_back({{"fold", f}, {"novel", s.novel_classes}, {"base", s.base_classes}});
  }
  folds["folds"] = list;
  std::ofstream out(fs::path(root) / "folds.json");
  out << folds.dump(2) << "\n";
  if (!out) throw std::runtime_error("dataset: cannot write folds.json");
}

Dataset Dataset::load(const std::string& root) {
  Dataset ds;
  std::ifstream in(fs::path(root) / "folds.json");
  if (!in) throw std::runtime_error("dataset: missing folds.json under " + root);
  json folds = json::parse(in);
  ds.num_classes = folds.at("num_classes").get<int>();

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(fs::path(root) / "images"))
    if (entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    ds.images.push_back(read_png_rgb((fs::path(root) / "images" / n).string()));
    ds.masks.push_back(read_png_index((fs::path(root) / "masks" / n).string()));
  }
  ds.rebuild_index();
  return ds;
}

LabelMap binarize(const LabelMap& semantic, int class_id) {
  LabelMap out(semantic.height, semantic.width);
  for (std::size_t i = 0; i < semantic.labels.size(); ++i)
    out.labels[i] = semantic.labels[i] == class_id ? 1 : 0;
  return out;
}

Episode sample_episode(const Dataset& dataset, const std::vector<int>& class_pool,
                       int shots, Rng& rng) {
  if (class_pool.empty()) throw std::invalid_argument("sample_episode: empty class pool");
  if (shots < 1) throw std::invalid_argument("sample_episode: shots must be >= 1");

  std::vector<int> candidates = class_pool;
  std::sort(candidates.begin(), candidates.end());
  while (!candidates.empty()) {
    const std::size_t pick = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1));
    const int cls = candidates[pick];
    auto it = dataset.class_to_images.find(cls);
    if (it == dataset.class_to_images.end() ||
        static_cast<int>(it->second.size()) < shots + 1) {
      candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
      continue;
    }

    // Partial Fisher-Yates for K+1 distinct image indices.
    std::vector<int> ids = it->second;
    for (int k = 0; k <= shots; ++k) {
      const std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(k, static_cast<std::int64_t>(ids.size()) - 1));
      std::swap(ids[static_cast<std::size_t>(k)], ids[j]);
    }

    Episode ep;
    ep.class_id = cls;
    ep.shot_count = shots;
    for (int k = 0; k < shots; ++k) {
      ep.support_images.push_back(dataset.images[static_cast<std::size_t>(ids[k])]);
      ep.support_masks.push_back(binarize(dataset.masks[static_cast<std::size_t>(ids[k])], cls));
    }
    const int q = ids[static_cast<std::size_t>(shots)];
    ep.query_image = dataset.images[static_cast<std::size_t>(q)];
    ep.query_semantic = dataset.masks[static_cast<std::size_t>(q)];
    ep.query_mask = binarize(ep.query_semantic, cls);
    return ep;
  }
  throw std::runtime_error("sample_episode: no class in the pool has enough images");
}

LabelMap remap_for_base_training(const LabelMap& semantic, const ClassSplit& split) {
  std::map<std::int32_t, std::int32_t> dense;
  std::int32_t next = 1;
  for (int c : split.base_classes) dense[c] = next++;
  LabelMap out(semantic.height, semantic.width);
  for (std::size_t i = 0; i < semantic.labels.size(); ++i) {
    auto it = dense.find(semantic.labels[i]);
    out.labels[i] = it == dense.end() ? 0 : it->second;
  }
  return out;
}

LabelMap mask_to_bbox(const LabelMap& mask) {
  int y0 = mask.height, y1 = -1, x0 = mask.width, x1 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x) != 0) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) throw std::invalid_argument("mask_to_bbox: empty mask");
  LabelMap out(mask.height, mask.width);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) out.at(y, x) = 1;
  return out;
}

void flip_horizontal(RgbImage& image, LabelMap& mask) {
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width / 2; ++x) {
      const int xr = image.width - 1 - x;
      for (int c = 0; c < 3; ++c) std::swap(image.at(y, x, c), image.at(y, xr, c));
      std::swap(mask.at(y, x), mask.at(y, xr));
    }
  }
}

void random_crop_resize(RgbImage& image, LabelMap& mask, Rng& rng, double min_scale) {
  const int h = image.height, w = image.width;
  const double scale = rng.uniform(min_scale, 1.0);
  const int ch = std::max(8, static_cast<int>(h * scale));
  const int cw = std::max(8, static_cast<int>(w * scale));
  const int oy = static_cast<int>(rng.uniform_int(0, h - ch));
  const int ox = static_cast<int>(rng.uniform_int(0, w - cw));

  RgbImage out(h, w);
  LabelMap outm(h, w);
  for (int y = 0; y < h; ++y) {
    // Nearest-neighbor keeps mask labels exact.
    const int sy = oy + std::min(ch - 1, (y * ch) / h);
    for (int x = 0; x < w; ++x) {
      const int sx = ox + std::min(cw - 1, (x * cw) / w);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
      outm.at(y, x) = mask.at(sy, sx);
    }
  }
  image = std::move(out);
  mask = std::move(outm);
}

}  // namespace bam
