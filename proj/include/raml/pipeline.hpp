#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "raml/anomaly.hpp"
#include "raml/config.hpp"
#include "raml/fewshot.hpp"
#include "raml/gradcheck.hpp"
#include "raml/metric_embedding.hpp"
#include "raml/scene.hpp"
#include "raml/toynet.hpp"

namespace raml {

// Checkpoints: one TNSR file per parameter block plus manifest.json.
// `producer` names the stage that writes the checkpoint, for error messages.
void save_net(const std::filesystem::path& dir, const ToyNetParams& params, const std::string& config_hash,
              int iters, std::uint64_t seed);
ToyNetParams load_net(const std::filesystem::path& dir, const std::string& producer);

void save_head(const std::filesystem::path& dir, const ProjectionHead& head, const PrototypeBank& bank,
               const std::string& config_hash, int iters, std::uint64_t seed);
ProjectionHead load_head(const std::filesystem::path& dir, const std::string& producer);
PrototypeBank load_prototypes(const std::filesystem::path& dir, const std::string& producer);

/// Region index map: 0 = no region, i + 1 = region i.
void write_regions(const std::filesystem::path& path, const RegionSet& regions, const std::string& comment);
RegionSet read_regions(const std::filesystem::path& path);

/// Training scenes used as shots, per novel class (indices into data.scenes).
std::vector<std::vector<std::size_t>> select_shots(const Dataset& data, const RunConfig& cfg);

/// MIoU report as JSON text with percentages rounded to one decimal.
std::string miou_to_json(const MiouReport& rep, int indent = 2);

void stage_gen_data(const RunConfig& cfg);
void stage_train_closed(const RunConfig& cfg);
void stage_embed_train(const RunConfig& cfg);
void stage_separate(const RunConfig& cfg);

struct AnomalyReport {
  AnomalyMetrics raml;
  std::optional<AnomalyMetrics> maxlogit;
};
AnomalyReport stage_anomaly_score(const RunConfig& cfg, bool with_maxlogit);

void stage_mca_finetune(const RunConfig& cfg);
void stage_fewshot(const RunConfig& cfg);

struct EvalReport {
  MiouReport raml;
  MiouReport finetune;
  MiouReport closed;
};
EvalReport stage_evaluate(const RunConfig& cfg);

/// mIoU of `<pred_dir>/<scene id><suffix>` label maps over the test split.
MiouReport evaluate_predictions(const RunConfig& cfg, const std::filesystem::path& pred_dir,
                                const std::string& suffix);

GradCheckReport stage_grad_check(const RunConfig& cfg);

/// Every stage in order. Returns false when the gradient check fails.
bool run_all(const RunConfig& cfg);

}  // namespace raml
