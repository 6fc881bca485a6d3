#include "bam/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bam {

namespace {

struct Color {
  double r, g, b;
};

// Class tints are weak on purpose: instance colors are drawn mostly at
// random (see below) so geometry, not color, carries the class signal.
Color base_color(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSquare: return {0.80, 0.30, 0.30};
    case ShapeKind::kCircle: return {0.74, 0.42, 0.30};
    case ShapeKind::kTriangle: return {0.30, 0.70, 0.35};
    case ShapeKind::kCross: return {0.36, 0.74, 0.50};
    case ShapeKind::kRing: return {0.35, 0.40, 0.80};
    case ShapeKind::kBar: return {0.48, 0.36, 0.76};
    case ShapeKind::kDiamond: return {0.75, 0.70, 0.30};
    case ShapeKind::kFrame: return {0.62, 0.60, 0.38};
  }
  return {0.5, 0.5, 0.5};
}

// Fraction of the instance color taken from the random draw rather than the
// class tint.
constexpr double kColorRandomness = 0.65;

struct PlacedShape {
  ShapeKind kind;
  int cy, cx;      // center
  int size;        // characteristic half-extent or side, per kind
  int aux;         // secondary extent (ring inner radius, bar thickness, ...)
  bool rotated;    // bar orientation
};

/// Pixel-exact membership test; pixel centers at integer coordinates.
bool inside(const PlacedShape& s, int y, int x) {
  const int dy = y - s.cy, dx = x - s.cx;
  switch (s.kind) {
    case ShapeKind::kSquare:
      // size = side length, anchored so the box spans [cy, cy+size).
      return y >= s.cy && y < s.cy + s.size && x >= s.cx && x < s.cx + s.size;
    case ShapeKind::kCircle:
      return dy * dy + dx * dx <= s.size * s.size;
    case ShapeKind::kTriangle: {
      // Upward isoceles triangle with apex at (cy-size, cx).
      if (dy < -s.size || dy > s.size) return false;
      const double half_width = (dy + s.size) * 0.5;
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::kCross:
      return (std::abs(dx) <= s.aux && std::abs(dy) <= s.size) ||
             (std::abs(dy) <= s.aux && std::abs(dx) <= s.size);
    case ShapeKind::kRing: {
      const int d2 = dy * dy + dx * dx;
      return d2 <= s.size * s.size && d2 > s.aux * s.aux;
    }
    case ShapeKind::kBar:
      return s.rotated ? (std::abs(dx) <= s.aux && std::abs(dy) <= s.size)
                       : (std::abs(dy) <= s.aux && std::abs(dx) <= s.size);
    case ShapeKind::kDiamond:
      return std::abs(dy) + std::abs(dx) <= s.size;
    case ShapeKind::kFrame:
      return std::abs(dy) <= s.size && std::abs(dx) <= s.size &&
             !(std::abs(dy) <= s.aux && std::abs(dx) <= s.aux);
  }
  return false;
}

}  // namespace

ShapeKind shape_kind_from_name(const std::string& name) {
  if (name == "square") return ShapeKind::kSquare;
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "triangle") return ShapeKind::kTriangle;
  if (name == "cross") return ShapeKind::kCross;
  if (name == "ring") return ShapeKind::kRing;
  if (name == "bar") return ShapeKind::kBar;
  if (name == "diamond") return ShapeKind::kDiamond;
  if (name == "frame") return ShapeKind::kFrame;
  throw std::invalid_argument("unknown shape kind: " + name);
}

std::string shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kBar: return "bar";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kFrame: return "frame";
  }
  return "unknown";
}

std::vector<ShapeKind> default_shape_classes(int count) {
  static const ShapeKind all[] = {ShapeKind::kSquare,  ShapeKind::kCircle,
                                  ShapeKind::kTriangle, ShapeKind::kCross,
                                  ShapeKind::kRing,     ShapeKind::kBar,
                                  ShapeKind::kDiamond,  ShapeKind::kFrame};
  if (count < 1 || count > 8)
    throw std::invalid_argument("shape class count must be in [1, 8]");
  return {all, all + count};
}

Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  const int n = spec.canvas_size;
  if (n < 32) throw std::invalid_argument("canvas must be at least 32x32");
  if (spec.shape_classes.empty()) throw std::invalid_argument("no shape classes");
  if (spec.min_shapes_per_image < 0 || spec.max_shapes_per_image < spec.min_shapes_per_image)
    throw std::invalid_argument("bad shapes-per-image range");

  // Float canvas in [0,1]; quantized at the end.
  std::vector<double> canvas(static_cast<std::size_t>(n) * n * 3);
  const double bg = 0.48 + rng.uniform(-0.05, 0.05);
  for (auto& v : canvas) v = bg;
  LabelMap mask(n, n);

  // Scene-wide illumination and color cast. Support/query pairs from
  // differently lit scenes are genuinely harder to match, which is exactly
  // the variation the Gram-difference indicator is meant to flag.
  const double illumination = rng.uniform(0.72, 1.25);
  const double cast_r = rng.uniform(0.85, 1.15);
  const double cast_g = rng.uniform(0.85, 1.15);
  const double cast_b = rng.uniform(0.85, 1.15);
  std::vector<PlacedShapeInfo> placed_shapes;

  const int want = static_cast<int>(
      rng.uniform_int(spec.min_shapes_per_image, spec.max_shapes_per_image));
  for (int k = 0; k < want; ++k) {
    // A few placement attempts per shape; skip it if the canvas is too full.
    bool ok = false;
    for (int attempt = 0; attempt < 12 && !ok; ++attempt) {
      const int cls = static_cast<int>(
          rng.uniform_int(1, static_cast<std::int64_t>(spec.shape_classes.size())));
      PlacedShape s;
      s.kind = spec.shape_classes[static_cast<std::size_t>(cls - 1)];
      // Size spread keeps single supports imperfect without starving the
      // coarse base-head resolution.
      const int lo = std::max(6, n / 9), hi = std::max(lo + 2, n / 4 + 2);
      s.size = static_cast<int>(rng.uniform_int(lo, hi));
      s.aux = std::max(1, s.size / 3);
      s.rotated = rng.bernoulli(0.5);
      const int margin = s.size + 1;
      if (2 * margin >= n) continue;
      s.cy = static_cast<int>(rng.uniform_int(margin, n - 1 - margin));
      s.cx = static_cast<int>(rng.uniform_int(margin, n - 1 - margin));

      // Count fresh pixels; partial occlusion is allowed (last drawn wins)
      // but a shape must keep a recognizable majority of empty canvas.
      std::int64_t area = 0, fresh = 0;
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
          if (inside(s, y, x)) {
            ++area;
            if (mask.at(y, x) == 0) ++fresh;
          }
      if (area == 0 || fresh * 4 < area * 3) continue;

      const Color tint = base_color(s.kind);
      const Color random{rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9),
                         rng.uniform(0.15, 0.9)};
      const Color fill{tint.r + kColorRandomness * (random.r - tint.r),
                       tint.g + kColorRandomness * (random.g - tint.g),
                       tint.b + kColorRandomness * (random.b - tint.b)};
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          if (!inside(s, y, x)) continue;
          const std::size_t off = (static_cast<std::size_t>(y) * n + x) * 3;
          canvas[off] = fill.r;
          canvas[off + 1] = fill.g;
          canvas[off + 2] = fill.b;
          mask.at(y, x) = cls;
        }
      }
      ok = true;
      placed_shapes.push_back({cls, s.kind, s.cy, s.cx, s.size, s.aux, s.rotated});
    }
  }

  Scene scene;
  scene.shapes = std::move(placed_shapes);
  scene.mask = std::move(mask);
  scene.image = RgbImage(n, n);
  const double cast[3] = {cast_r, cast_g, cast_b};
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    double v = canvas[i] * illumination * cast[i % 3];
    if (spec.noise_level > 0) v += rng.normal() * spec.noise_level;
    v = std::min(1.0, std::max(0.0, v));
    scene.image.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return scene;
}

}  // namespace bam
