#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "raml/scene.hpp"

using namespace raml;

namespace {

Background grey() { return Background{{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}, 0.0}; }

std::size_t count_label(const LabelMap& m, int label) {
  return static_cast<std::size_t>(std::count(m.labels().begin(), m.labels().end(), label));
}

}  // namespace

TEST_CASE("rendered areas match the analytic areas") {
  for (ShapeKind k : {ShapeKind::kDisk, ShapeKind::kSquare, ShapeKind::kTriangle, ShapeKind::kCross,
                      ShapeKind::kRing, ShapeKind::kBar}) {
    const double r = 40.0;  // straight edges other than the cross arms fall on pixel boundaries
    ShapePlacement s{k, 1, 60.0, 60.0, r, {1.0, 0.0, 0.0}};
    Scene sc = render_scene(120, 120, grey(), {s});
    const double area = static_cast<double>(count_label(sc.gt, 1));
    CAPTURE(shape_name(k));
    CHECK(std::abs(area - shape_area(k, r)) <= 0.03 * shape_area(k, r));
  }
  SUBCASE("disk within 2% of pi r^2") {
    Scene sc = render_scene(80, 80, grey(), {ShapePlacement{ShapeKind::kDisk, 1, 40, 40, 15, {0, 0, 1}}});
    CHECK(std::abs(count_label(sc.gt, 1) - std::numbers::pi * 225) <= 0.02 * std::numbers::pi * 225);
  }
}

TEST_CASE("ring has a background hole") {
  Scene sc = render_scene(64, 64, grey(), {ShapePlacement{ShapeKind::kRing, 2, 32, 32, 20, {0, 1, 0}}});
  CHECK(sc.gt(32, 32) == 0);
  CHECK(sc.gt(32, 32 + 15) == 2);
}

TEST_CASE("render without shapes is background only") {
  Scene sc = render_scene(16, 20, Background{{0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}, 1.0}, {});
  CHECK(count_label(sc.gt, 0) == 16u * 20u);
  for (int x = 0; x < 20; ++x) CHECK(sc.image(2, 5, x) == doctest::Approx(0.3));
}

TEST_CASE("later shapes are drawn on top") {
  Scene sc = render_scene(40, 40, grey(),
                          {ShapePlacement{ShapeKind::kSquare, 1, 20, 20, 10, {1, 0, 0}},
                           ShapePlacement{ShapeKind::kDisk, 2, 20, 20, 5, {0, 0, 1}}});
  CHECK(sc.gt(20, 20) == 2);
  CHECK(sc.image(2, 20, 20) == doctest::Approx(1.0));
  CHECK(sc.gt(20, 12) == 1);
}

TEST_CASE("generation is deterministic and labelled") {
  SceneSpec spec;
  Rng a(5), b(5), c(6);
  Scene s1 = gen_scene(spec, a), s2 = gen_scene(spec, b), s3 = gen_scene(spec, c);
  CHECK(s1.image == s2.image);
  CHECK(s1.gt == s2.gt);
  CHECK_FALSE(s1.image == s3.image);
  for (float v : s1.image.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  for (auto l : s1.gt.labels()) CHECK(l < spec.num_classes());
}

TEST_CASE("closed labels hide novel classes") {
  LabelMap gt(1, 5, std::vector<std::uint8_t>{0, 1, 3, 4, 2});
  LabelMap c = closed_labels(gt, 4);
  CHECK(std::ranges::equal(c.labels(), std::vector<std::uint8_t>{0, 1, 3, LabelMap::kIgnore, 2}));
}

TEST_CASE("dataset split and round trip") {
  SceneSpec spec;
  Dataset d = generate_dataset(spec, 200);
  CHECK(d.split("train").size() == 150);
  CHECK(d.split("test").size() == 50);
  CHECK(d.class_names.size() == static_cast<std::size_t>(spec.num_classes()));
  Dataset again = generate_dataset(spec, 8);
  for (int i = 0; i < 8; ++i) CHECK(again.scenes[i].scene.image == d.scenes[i].scene.image);

  oracle::TempDir tmp("scene");
  Dataset small = generate_dataset(spec, 6);
  write_dataset(tmp.path(), small, "0123456789abcdef");
  Dataset back = read_dataset(tmp.path());
  REQUIRE(back.scenes.size() == 6);
  for (int i = 0; i < 6; ++i) {
    CHECK(back.scenes[i].id == small.scenes[i].id);
    CHECK(back.scenes[i].split == small.scenes[i].split);
    CHECK(back.scenes[i].scene.gt == small.scenes[i].scene.gt);
    for (std::size_t p = 0; p < small.scenes[i].scene.image.size(); ++p) {
      CHECK(std::abs(back.scenes[i].scene.image.data()[p] - small.scenes[i].scene.image.data()[p]) <= 0.5f / 255 + 1e-6f);
    }
  }
  CHECK_THROWS_AS(read_dataset(tmp.path() / "missing"), MissingArtifactError);
}

TEST_CASE("scene spec validation names the field") {
  SceneSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.size_max = 40;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("size_max"), PreconditionError);
  spec = SceneSpec{};
  spec.novel = {ShapeKind::kDisk};
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("novel"), PreconditionError);
  spec = SceneSpec{};
  spec.novel_probability = 1.5;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("novel_probability"), PreconditionError);
  CHECK(parse_shape("stripe-bar") == ShapeKind::kBar);
  CHECK_THROWS_AS(parse_shape("hexagon"), PreconditionError);
}
