// Command-line driver for the RAML pipeline stages.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "raml/config.hpp"
#include "raml/errors.hpp"
#include "raml/pipeline.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

struct Overrides {
  std::string config;
  std::string data, ckpt, out;
  std::vector<std::string> sets;
  // gen-data
  std::optional<int> scenes;
  std::optional<std::string> known, novel;
  std::optional<std::uint64_t> seed;
  // embed-train
  std::optional<double> gamma, margin, lr;
  std::optional<int> iters;
  std::optional<std::uint64_t> head_seed;
};

void set(raml::RunConfig& cfg, const std::string& key, const std::string& value) { raml::apply_override(cfg, key, value); }

raml::RunConfig build_config(const Overrides& o) {
  raml::RunConfig cfg = o.config.empty() ? raml::RunConfig{} : raml::load_config(o.config);
  if (!o.data.empty()) cfg.paths.data = o.data;
  if (!o.ckpt.empty()) cfg.paths.checkpoints = o.ckpt;
  if (!o.out.empty()) cfg.paths.output = o.out;
  if (o.scenes) set(cfg, "data.scenes", std::to_string(*o.scenes));
  if (o.known) set(cfg, "data.known", *o.known);
  if (o.novel) {
    set(cfg, "data.novel", *o.novel);
    const auto n = std::count(o.novel->begin(), o.novel->end(), ',') + 1;
    set(cfg, "fewshot.M", std::to_string(n));
  }
  if (o.seed) set(cfg, "data.seed", std::to_string(*o.seed));
  if (o.gamma) set(cfg, "circle.gamma", std::to_string(*o.gamma));
  if (o.margin) set(cfg, "circle.margin", std::to_string(*o.margin));
  if (o.lr) set(cfg, "head_train.lr", std::to_string(*o.lr));
  if (o.iters) set(cfg, "head_train.iters", std::to_string(*o.iters));
  if (o.head_seed) set(cfg, "head_train.seed", std::to_string(*o.head_seed));
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + kv + "'");
    set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-aware metric learning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("-c,--config", o.config, "JSON run configuration");
  app.add_option("--data", o.data, "dataset directory");
  app.add_option("--ckpt", o.ckpt, "checkpoint directory");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--set", o.sets, "override a config value, e.g. --set urs.beta=0.4");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
  gen->add_option("--scenes", o.scenes, "number of scenes");
  gen->add_option("--known", o.known, "comma-separated known shapes");
  gen->add_option("--novel", o.novel, "comma-separated novel shapes");
  gen->add_option("--seed", o.seed, "dataset seed");

  app.add_subcommand("train-closed", "train the close-set network");
  auto* embed = app.add_subcommand("embed-train", "train the projection head and known prototypes");
  embed->add_option("--gamma", o.gamma, "circle loss scale");
  embed->add_option("--margin", o.margin, "circle loss margin");
  embed->add_option("--iters", o.iters, "training iterations");
  embed->add_option("--lr", o.lr, "initial learning rate");
  embed->add_option("--seed", o.head_seed, "batch sampling seed");
  app.add_subcommand("separate", "candidate regions of the test scenes");
  auto* anomaly = app.add_subcommand("anomaly-score", "region-aware anomaly maps and metrics");
  std::string baseline;
  anomaly->add_option("--baseline", baseline, "also score a baseline")->check(CLI::IsMember({"maxlogit"}));
  app.add_subcommand("mca-finetune", "fine-tune with meta channels and train the naive baseline");
  app.add_subcommand("fewshot", "classify candidate regions against novel prototypes");
  auto* eval = app.add_subcommand("evaluate", "mIoU of the few-shot predictions");
  std::string pred_dir, suffix = ".pgm";
  eval->add_option("--pred-dir", pred_dir, "evaluate <id><suffix> label maps from this directory instead");
  eval->add_option("--suffix", suffix, "file name suffix for --pred-dir");
  app.add_subcommand("grad-check", "finite-difference gradient suite");
  app.add_subcommand("all", "run every stage in order");
  app.add_subcommand("dump-config", "print the effective configuration as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    const raml::RunConfig cfg = build_config(o);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-data") {
      raml::stage_gen_data(cfg);
    } else if (cmd == "train-closed") {
      raml::stage_train_closed(cfg);
    } else if (cmd == "embed-train") {
      raml::stage_embed_train(cfg);
    } else if (cmd == "separate") {
      raml::stage_separate(cfg);
    } else if (cmd == "anomaly-score") {
      raml::stage_anomaly_score(cfg, baseline == "maxlogit");
    } else if (cmd == "mca-finetune") {
      raml::stage_mca_finetune(cfg);
    } else if (cmd == "fewshot") {
      raml::stage_fewshot(cfg);
    } else if (cmd == "evaluate") {
      if (pred_dir.empty()) {
        raml::stage_evaluate(cfg);
      } else {
        std::cout << raml::miou_to_json(raml::evaluate_predictions(cfg, pred_dir, suffix)) << "\n";
      }
    } else if (cmd == "grad-check") {
      if (!raml::stage_grad_check(cfg).pass) return kExitCheck;
    } else if (cmd == "all") {
      if (!raml::run_all(cfg)) return kExitCheck;
    } else if (cmd == "dump-config") {
      std::cout << raml::config_to_json(cfg);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const raml::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
