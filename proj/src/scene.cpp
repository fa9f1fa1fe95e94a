#include "raml/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"

#include "raml/tensor_io.hpp"

namespace raml {

namespace {

using json = nlohmann::json;

constexpr int kSuper = 4;  // supersampling factor per axis

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void base_color(ShapeKind kind, double out[3]) {
  static constexpr double kPalette[6][3] = {
      {0.90, 0.30, 0.25},  // disk
      {0.30, 0.85, 0.35},  // square
      {0.35, 0.45, 0.95},  // triangle
      {0.95, 0.85, 0.30},  // cross
      {0.90, 0.40, 0.90},  // ring
      {0.30, 0.90, 0.90},  // bar
  };
  const auto& c = kPalette[static_cast<int>(kind)];
  std::copy(c, c + 3, out);
}

// Point (dx, dy) relative to the shape center, y pointing down.
bool inside(ShapeKind kind, double r, double dx, double dy) {
  switch (kind) {
    case ShapeKind::kDisk:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::kTriangle: {
      // Equilateral, apex up, circumradius r.
      if (dy > 0.5 * r) return false;
      const double s = std::sqrt(3.0);
      return s * std::abs(dx) <= dy + r;
    }
    case ShapeKind::kCross: {
      const double t = r / 3.0;
      return (std::abs(dx) <= r && std::abs(dy) <= t) || (std::abs(dy) <= r && std::abs(dx) <= t);
    }
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.1225 * r * r;
    }
    case ShapeKind::kBar:
      return std::abs(dx) <= r && std::abs(dy) <= 0.25 * r;
  }
  return false;
}

json spec_to_json(const SceneSpec& s) {
  json known = json::array(), novel = json::array();
  for (auto k : s.known) known.push_back(shape_name(k));
  for (auto k : s.novel) novel.push_back(shape_name(k));
  return {{"height", s.height},
          {"width", s.width},
          {"known", known},
          {"novel", novel},
          {"min_shapes", s.min_shapes},
          {"max_shapes", s.max_shapes},
          {"novel_probability", s.novel_probability},
          {"size_min", s.size_min},
          {"size_max", s.size_max},
          {"color_jitter", s.color_jitter},
          {"background_jitter", s.background_jitter},
          {"min_region_area", s.min_region_area},
          {"seed", s.seed}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.known.clear();
  s.novel.clear();
  for (const auto& k : j.at("known")) s.known.push_back(parse_shape(k));
  for (const auto& k : j.at("novel")) s.novel.push_back(parse_shape(k));
  s.min_shapes = j.at("min_shapes");
  s.max_shapes = j.at("max_shapes");
  s.novel_probability = j.at("novel_probability");
  s.size_min = j.at("size_min");
  s.size_max = j.at("size_max");
  s.color_jitter = j.at("color_jitter");
  s.background_jitter = j.at("background_jitter");
  s.min_region_area = j.at("min_region_area");
  s.seed = j.at("seed");
  return s;
}

std::vector<std::string> class_names(const SceneSpec& s) {
  std::vector<std::string> names{"background"};
  for (auto k : s.known) names.push_back(shape_name(k));
  for (auto k : s.novel) names.push_back(shape_name(k));
  return names;
}

}  // namespace

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kBar: return "stripe-bar";
  }
  return "?";
}

ShapeKind parse_shape(const std::string& name) {
  if (name == "disk") return ShapeKind::kDisk;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  if (name == "cross") return ShapeKind::kCross;
  if (name == "ring") return ShapeKind::kRing;
  if (name == "stripe-bar" || name == "bar") return ShapeKind::kBar;
  throw PreconditionError("unknown shape '" + name + "' (expected disk, square, triangle, cross, ring, stripe-bar)");
}

double shape_area(ShapeKind kind, double r) {
  switch (kind) {
    case ShapeKind::kDisk: return std::numbers::pi * r * r;
    case ShapeKind::kSquare: return 1.7 * 1.7 * r * r;
    case ShapeKind::kTriangle: return 3.0 * std::sqrt(3.0) / 4.0 * r * r;
    case ShapeKind::kCross: return 20.0 / 9.0 * r * r;
    case ShapeKind::kRing: return 0.8775 * std::numbers::pi * r * r;
    case ShapeKind::kBar: return r * r;
  }
  return 0.0;
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw PreconditionError("scene spec: " + field + " " + why);
  };
  if (height < 8) fail("height", "must be >= 8");
  if (width < 8) fail("width", "must be >= 8");
  if (known.empty()) fail("known", "must list at least one shape");
  std::set<ShapeKind> k(known.begin(), known.end());
  if (k.size() != known.size()) fail("known", "contains duplicates");
  std::set<ShapeKind> n(novel.begin(), novel.end());
  if (n.size() != novel.size()) fail("novel", "contains duplicates");
  for (auto s : novel) {
    if (k.contains(s)) fail("novel", "shape '" + shape_name(s) + "' is also known");
  }
  if (num_classes() >= LabelMap::kIgnore) fail("known", "too many classes");
  if (min_shapes < 0) fail("min_shapes", "must be >= 0");
  if (max_shapes < min_shapes) fail("max_shapes", "must be >= min_shapes");
  if (!(novel_probability >= 0.0 && novel_probability <= 1.0)) fail("novel_probability", "must be in [0,1]");
  if (!(size_min > 0.0)) fail("size_min", "must be positive");
  if (size_max < size_min) fail("size_max", "must be >= size_min");
  if (2.0 * size_max + 2.0 > std::min(height, width)) {
    fail("size_max", "= " + std::to_string(size_max) + " makes shapes larger than the " + std::to_string(height) + "x" +
                         std::to_string(width) + " canvas");
  }
  if (min_region_area < 1) fail("min_region_area", "must be >= 1");
  for (auto s : known) {
    if (shape_area(s, size_min) < min_region_area) fail("size_min", "gives " + shape_name(s) + " area below min_region_area");
  }
  for (auto s : novel) {
    if (shape_area(s, size_min) < min_region_area) fail("size_min", "gives " + shape_name(s) + " area below min_region_area");
  }
  if (!(color_jitter >= 0.0 && color_jitter <= 0.5)) fail("color_jitter", "must be in [0,0.5]");
  if (!(background_jitter >= 0.0 && background_jitter <= 0.5)) fail("background_jitter", "must be in [0,0.5]");
}

Scene render_scene(int height, int width, const Background& bg, const std::vector<ShapePlacement>& shapes) {
  Scene s{Tensor3(3, height, width), LabelMap(height, width, 0)};
  const double ux = std::cos(bg.angle), uy = std::sin(bg.angle);
  // Projection range over the canvas corners, for t in [0,1].
  double pmin = 0.0, pmax = 0.0;
  for (double cy : {0.0, static_cast<double>(height)}) {
    for (double cx : {0.0, static_cast<double>(width)}) {
      const double p = cx * ux + cy * uy;
      pmin = std::min(pmin, p);
      pmax = std::max(pmax, p);
    }
  }
  const double span = pmax > pmin ? pmax - pmin : 1.0;
  std::vector<double> rgb(static_cast<std::size_t>(3) * height * width);
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double t = ((x + 0.5) * ux + (y + 0.5) * uy - pmin) / span;
      for (int c = 0; c < 3; ++c) rgb[c * hw + y * width + x] = bg.lo[c] + t * (bg.hi[c] - bg.lo[c]);
    }
  }
  for (const auto& sh : shapes) {
    const int x0 = std::max(0, static_cast<int>(std::floor(sh.cx - sh.r - 1)));
    const int x1 = std::min(width, static_cast<int>(std::ceil(sh.cx + sh.r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(sh.cy - sh.r - 1)));
    const int y1 = std::min(height, static_cast<int>(std::ceil(sh.cy + sh.r + 1)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper - sh.cx;
            const double py = y + (sy + 0.5) / kSuper - sh.cy;
            if (inside(sh.kind, sh.r, px, py)) ++hits;
          }
        }
        if (hits == 0) continue;
        const double a = static_cast<double>(hits) / (kSuper * kSuper);
        for (int c = 0; c < 3; ++c) {
          double& v = rgb[c * hw + y * width + x];
          v = (1.0 - a) * v + a * sh.color[c];
        }
        if (2 * hits >= kSuper * kSuper) s.gt(y, x) = static_cast<std::uint8_t>(sh.label);
      }
    }
  }
  auto out = s.image.data();
  for (std::size_t i = 0; i < rgb.size(); ++i) out[i] = static_cast<float>(std::clamp(rgb[i], 0.0, 1.0));
  return s;
}

Scene gen_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  Background bg{};
  const double gray = rng.uniform(0.15, 0.30);
  for (int c = 0; c < 3; ++c) {
    bg.lo[c] = gray + rng.uniform(-spec.background_jitter, spec.background_jitter);
    bg.hi[c] = bg.lo[c] + 0.10;
  }
  bg.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<std::pair<ShapeKind, int>> wanted;
  const int n_known = spec.min_shapes + static_cast<int>(rng.below(spec.max_shapes - spec.min_shapes + 1));
  for (int i = 0; i < n_known; ++i) {
    const std::size_t k = rng.below(spec.known.size());
    wanted.emplace_back(spec.known[k], 1 + static_cast<int>(k));
  }
  if (!spec.novel.empty() && rng.uniform() < spec.novel_probability) {
    const std::size_t k = rng.below(spec.novel.size());
    wanted.emplace_back(spec.novel[k], spec.num_known() + static_cast<int>(k));
  }

  std::vector<ShapePlacement> placed;
  for (const auto& [kind, label] : wanted) {
    const double r = rng.uniform(spec.size_min, spec.size_max);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double cx = rng.uniform(r + 1.0, spec.width - r - 1.0);
      const double cy = rng.uniform(r + 1.0, spec.height - r - 1.0);
      bool clear = true;
      for (const auto& p : placed) {
        if (std::hypot(cx - p.cx, cy - p.cy) < r + p.r + 3.0) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      ShapePlacement sp{kind, label, cx, cy, r, {}};
      base_color(kind, sp.color);
      for (double& c : sp.color) c = std::clamp(c + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0);
      placed.push_back(sp);
      break;
    }
  }
  return render_scene(spec.height, spec.width, bg, placed);
}

LabelMap closed_labels(const LabelMap& gt, int num_known) {
  LabelMap out = gt;
  for (auto& l : out.labels()) {
    if (l != LabelMap::kIgnore && l >= num_known) l = LabelMap::kIgnore;
  }
  return out;
}

std::vector<const SceneRecord*> Dataset::split(const std::string& name) const {
  std::vector<const SceneRecord*> out;
  for (const auto& s : scenes) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

Dataset generate_dataset(const SceneSpec& spec, int scenes) {
  spec.validate();
  if (scenes < 1) throw PreconditionError("scene spec: scenes must be >= 1");
  Dataset d;
  d.spec = spec;
  d.class_names = class_names(spec);
  for (int i = 0; i < scenes; ++i) {
    const std::uint64_t seed = splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(i)));
    Rng rng(seed);
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", i);
    d.scenes.push_back({id, i % 4 == 3 ? "test" : "train", seed, gen_scene(spec, rng)});
  }
  return d;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data, const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  json scenes = json::array();
  const std::string comment = "config " + config_hash;
  for (const auto& s : data.scenes) {
    write_image_ppm(dir / (s.id + ".ppm"), s.scene.image, comment);
    write_label_pgm(dir / (s.id + "_gt.pgm"), s.scene.gt, comment);
    scenes.push_back({{"id", s.id},
                      {"image", s.id + ".ppm"},
                      {"labels", s.id + "_gt.pgm"},
                      {"split", s.split},
                      {"seed", s.seed}});
  }
  json known = json::array(), novel = json::array();
  for (int c = 1; c < data.spec.num_known(); ++c) known.push_back(c);
  for (int c = data.spec.num_known(); c < data.spec.num_classes(); ++c) novel.push_back(c);
  json index = {{"format", "raml-dataset"},
                {"version", 1},
                {"config_hash", config_hash},
                {"spec", spec_to_json(data.spec)},
                {"classes", data.class_names},
                {"background", 0},
                {"known", known},
                {"novel", novel},
                {"scenes", scenes}};
  write_file_bytes(dir / "index.json", index.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) {
    throw MissingArtifactError("missing " + index_path.string() + " (produced by stage gen-data)");
  }
  json index;
  try {
    index = json::parse(read_file_bytes(index_path));
  } catch (const json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  Dataset d;
  try {
    d.spec = spec_from_json(index.at("spec"));
    d.class_names = index.at("classes").get<std::vector<std::string>>();
    for (const auto& s : index.at("scenes")) {
      SceneRecord r;
      r.id = s.at("id");
      r.split = s.at("split");
      r.seed = s.at("seed");
      r.scene.image = read_image_ppm(dir / s.at("image").get<std::string>());
      r.scene.gt = read_label_pgm(dir / s.at("labels").get<std::string>());
      r.scene.gt.validate(d.spec.num_classes());
      d.scenes.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace raml
