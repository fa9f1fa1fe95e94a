#include "doctest.h"

#include "json.hpp"
#include "raml/config.hpp"

using namespace raml;

TEST_CASE("config JSON round trip") {
  RunConfig c;
  c.urs.beta = 0.4;
  c.mca.K = 6;
  c.paths.output = "/tmp/elsewhere";
  const std::string text = config_to_json(c);
  RunConfig back = config_from_json(text);
  CHECK(config_to_json(back) == text);
  CHECK(back.urs.beta == 0.4);
  CHECK(back.mca.K == 6);
}

TEST_CASE("partial JSON overrides defaults") {
  RunConfig c = config_from_json(R"({"urs": {"alpha": 30}})");
  CHECK(c.urs.alpha == 30);
  CHECK(c.urs.beta == RunConfig{}.urs.beta);
  CHECK(config_to_json(config_from_json("{}")) == config_to_json(RunConfig{}));
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS(config_from_json(R"({"urs": {"alfa": 3}})"), doctest::Contains("alfa"), FormatError);
  RunConfig c;
  CHECK_THROWS_WITH_AS(apply_override(c, "mca.kapa", "0.2"), doctest::Contains("mca.kapa"), FormatError);
  CHECK_THROWS_AS(config_from_json("[1,2]"), FormatError);
  CHECK_THROWS_AS(config_from_json("{not json"), FormatError);
}

TEST_CASE("dotted overrides") {
  RunConfig c;
  apply_override(c, "urs.beta", "0.4");
  CHECK(c.urs.beta == 0.4);
  apply_override(c, "mca.activation", "softmax_all");
  CHECK(c.mca.activation == MetaActivation::kSoftmaxAll);
  apply_override(c, "data.known", "disk,cross");
  CHECK(c.data.spec.known == std::vector<ShapeKind>{ShapeKind::kDisk, ShapeKind::kCross});
  CHECK_THROWS_AS(apply_override(c, "mca.activation", "relu"), FormatError);
  CHECK_THROWS_AS(apply_override(c, "shots.period", "0"), PreconditionError);
}

TEST_CASE("hash ignores paths and tracks tunables") {
  RunConfig a, b;
  b.paths.data = "/somewhere/else";
  b.paths.output = "x";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.urs.alpha = 51;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("validation") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  c.fewshot.M = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("fewshot.M"), PreconditionError);
  c = RunConfig{};
  c.mca_train.clip_norm = -1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("clip_norm"), PreconditionError);
}
