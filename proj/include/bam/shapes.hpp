#pragma once

#include <string>
#include <vector>

#include "bam/image_io.hpp"
#include "bam/rng.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Shape vocabulary. Class id of a shape is its 1-based position in
/// SceneSpec::shape_classes; id 0 is always background.
enum class ShapeKind { kSquare, kCircle, kTriangle, kCross, kRing, kBar, kDiamond, kFrame };

ShapeKind shape_kind_from_name(const std::string& name);
std::string shape_kind_name(ShapeKind kind);

/// Default class ordering: square, circle, triangle, cross, ring, bar,
/// diamond, frame (truncated to the requested count).
std::vector<ShapeKind> default_shape_classes(int count);

struct SceneSpec {
  int canvas_size = 64;
  std::vector<ShapeKind> shape_classes = default_shape_classes(6);
  int min_shapes_per_image = 2;
  int max_shapes_per_image = 4;
  double noise_level = 0.02;
  std::uint64_t rng_seed = 0;
};

struct PlacedShapeInfo {
  int class_id = 0;
  ShapeKind kind = ShapeKind::kSquare;
  int cy = 0, cx = 0;
  int size = 0;   // characteristic extent (side for squares, radius for circles)
  int aux = 0;    // secondary extent (ring inner radius, bar half-thickness)
  bool rotated = false;
};

struct Scene {
  RgbImage image;
  LabelMap mask;
  std::vector<PlacedShapeInfo> shapes;  // draw order; later shapes win overlaps
};

/// Render one scene. Shapes are drawn back to front, last drawn wins on
/// overlap, and the index mask matches the rendered geometry pixel for
/// pixel. When the requested shape count does not fit, as many as fit are
/// placed.
Scene generate_scene(const SceneSpec& spec, Rng& rng);

}  // namespace bam
