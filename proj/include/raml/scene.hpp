#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "raml/rng.hpp"
#include "raml/tensor.hpp"

namespace raml {

enum class ShapeKind { kDisk, kSquare, kTriangle, kCross, kRing, kBar };

std::string shape_name(ShapeKind kind);
/// Accepts disk, square, triangle, cross, ring, stripe-bar (alias bar).
ShapeKind parse_shape(const std::string& name);
/// Analytic area of a shape with size parameter r (circumradius or half-extent).
double shape_area(ShapeKind kind, double r);

/// Label ids: 0 = background, 1..known.size() = known shapes, then novel shapes.
struct SceneSpec {
  int height = 64;
  int width = 64;
  std::vector<ShapeKind> known{ShapeKind::kDisk, ShapeKind::kSquare, ShapeKind::kTriangle};
  std::vector<ShapeKind> novel{ShapeKind::kRing};
  int min_shapes = 1;  // known shapes per scene
  int max_shapes = 3;
  double novel_probability = 0.5;
  double size_min = 7.0;
  double size_max = 11.0;
  double color_jitter = 0.06;
  double background_jitter = 0.05;
  int min_region_area = 16;
  std::uint64_t seed = 7;

  /// Throws PreconditionError naming the offending field.
  void validate() const;
  int num_known() const { return 1 + static_cast<int>(known.size()); }
  int num_classes() const { return num_known() + static_cast<int>(novel.size()); }
};

/// One shape to draw. `label` is the class id.
struct ShapePlacement {
  ShapeKind kind;
  int label;
  double cx, cy, r;
  double color[3];
};

struct Scene {
  Tensor3 image;  // 3 x H x W in [0,1]
  LabelMap gt;    // true ids, novel included
};

struct Background {
  double lo[3];
  double hi[3];
  double angle;  // gradient direction in radians
};

/// Background gradient plus anti-aliased shapes drawn in order (later on top).
/// A pixel takes a shape's label when at least half of its 4x4 subsamples
/// fall inside the shape.
Scene render_scene(int height, int width, const Background& bg, const std::vector<ShapePlacement>& shapes);

Scene gen_scene(const SceneSpec& spec, Rng& rng);

/// Ground truth with every label >= num_known replaced by the ignore sentinel.
LabelMap closed_labels(const LabelMap& gt, int num_known);

struct SceneRecord {
  std::string id;
  std::string split;  // "train" or "test"
  std::uint64_t seed;
  Scene scene;
};

struct Dataset {
  SceneSpec spec;
  std::vector<SceneRecord> scenes;
  std::vector<std::string> class_names;  // index = label id

  std::vector<const SceneRecord*> split(const std::string& name) const;
};

/// Every fourth scene (index % 4 == 3) goes to the test split.
Dataset generate_dataset(const SceneSpec& spec, int scenes);

/// Numbered PPM/PGM pairs plus index.json. `config_hash` is stored in the
/// index and in every image header comment.
void write_dataset(const std::filesystem::path& dir, const Dataset& data, const std::string& config_hash);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace raml
