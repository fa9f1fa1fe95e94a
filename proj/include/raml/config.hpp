#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "raml/fewshot.hpp"
#include "raml/gradcheck.hpp"
#include "raml/mca.hpp"
#include "raml/metric_embedding.hpp"
#include "raml/region_separation.hpp"
#include "raml/scene.hpp"
#include "raml/toynet.hpp"

namespace raml {

struct PathsConfig {
  std::filesystem::path data = "run/data";
  std::filesystem::path checkpoints = "run/ckpt";
  std::filesystem::path output = "run/out";
};

struct DataConfig {
  SceneSpec spec;
  int scenes = 200;
};

struct NetConfig {
  int hidden = 16;
  int features = 32;
  std::uint64_t seed = 11;
};

struct EmbeddingConfig {
  int hidden = 256;
  int out_dim = 16;
  std::uint64_t seed = 13;
};

enum class ShotSelection { kLargest, kRandom };

struct ShotConfig {
  ShotSelection selection = ShotSelection::kLargest;
  std::uint64_t seed = 17;
  int period = 5;  // one shot batch per `period` fine-tuning batches
};

struct MetricsConfig {
  bool per_image = false;  // average per image instead of pooling pixels
};

/// Every tunable of a pipeline run. Paths are excluded from the hash.
struct RunConfig {
  PathsConfig paths;
  DataConfig data;
  NetConfig net;
  EmbeddingConfig embedding;
  UrsConfig urs;
  McaConfig mca;
  FewshotConfig fewshot;
  CircleLossConfig circle;
  TrainConfig closed_train{SgdConfig{0.05, 0.9, 1e-4, 0.9}, 2000, 4, 21};
  HeadTrainConfig head_train;
  TrainConfig mca_train{SgdConfig{0.01, 0.9, 1e-4, 0.9}, 600, 4, 23, 1.0};
  TrainConfig ft_train{SgdConfig{0.01, 0.9, 1e-4, 0.9}, 200, 4, 29, 1.0};
  ShotConfig shots;
  MetricsConfig metrics;
  GradCheckOptions grad_check;

  void validate() const;
};

/// Full JSON form, paths included.
std::string config_to_json(const RunConfig& cfg);
/// Starts from defaults; every key present overrides. Unknown keys raise
/// FormatError naming the key.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Sets one value addressed by a dotted key, e.g. "urs.beta" = "0.4".
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

/// FNV-1a 64 of the canonical JSON without paths, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace raml
