#include "raml/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>

#include "json.hpp"

#include "raml/mca.hpp"
#include "raml/parallel.hpp"
#include "raml/region_separation.hpp"
#include "raml/rng.hpp"
#include "raml/tensor_io.hpp"

namespace raml {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kGenData = "gen-data";
constexpr const char* kTrainClosed = "train-closed";
constexpr const char* kEmbedTrain = "embed-train";
constexpr const char* kSeparate = "separate";
constexpr const char* kMcaFinetune = "mca-finetune";
constexpr const char* kFewshot = "fewshot";

fs::path closed_dir(const RunConfig& c) { return c.paths.checkpoints / "closed"; }
fs::path head_dir(const RunConfig& c) { return c.paths.checkpoints / "head"; }
fs::path mca_dir(const RunConfig& c) { return c.paths.checkpoints / "mca"; }
fs::path ft_dir(const RunConfig& c) { return c.paths.checkpoints / "ft"; }
fs::path regions_dir(const RunConfig& c) { return c.paths.output / "regions"; }
fs::path anomaly_dir(const RunConfig& c) { return c.paths.output / "anomaly"; }
fs::path fewshot_dir(const RunConfig& c) { return c.paths.output / "fewshot"; }

void log(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << "\n"; }

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw MissingArtifactError("missing " + path.string() + " (produced by stage " + producer + ")");
  }
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  write_file_bytes(path, j.dump(2) + "\n");
}

json read_json(const fs::path& path, const std::string& producer) {
  require(path, producer);
  try {
    return json::parse(read_file_bytes(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string hash_comment(const std::string& hash) { return "config " + hash; }

Dataset load_data(const RunConfig& cfg) {
  require(cfg.paths.data / "index.json", kGenData);
  Dataset d = read_dataset(cfg.paths.data);
  if (d.spec.num_known() != cfg.data.spec.num_known() || d.spec.num_classes() != cfg.data.spec.num_classes()) {
    throw PreconditionError("dataset class layout differs from the config; rerun gen-data");
  }
  return d;
}

std::vector<TrainSample> closed_samples(const std::vector<const SceneRecord*>& scenes, int num_known) {
  std::vector<TrainSample> out;
  out.reserve(scenes.size());
  for (const auto* s : scenes) out.push_back({s->scene.image, closed_labels(s->scene.gt, num_known)});
  return out;
}

std::vector<ForwardCache<float>> forward_all(const ToyNetParams& net, const std::vector<const SceneRecord*>& scenes) {
  std::vector<ForwardCache<float>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = forward(net, scenes[i]->scene.image); });
  return out;
}

json log_json(const TrainLog& log) {
  json lines = json::array();
  for (const auto& e : log.entries) {
    lines.push_back({{"iter", e.iter},
                     {"seg", e.loss.seg},
                     {"inter", e.loss.inter},
                     {"split", e.loss.split},
                     {"rec", e.loss.rec},
                     {"total", e.loss.total}});
  }
  return lines;
}

void write_log(const fs::path& path, const TrainLog& log) {
  std::string text;
  for (const auto& line : log_json(log)) text += line.dump() + "\n";
  fs::create_directories(path.parent_path());
  write_file_bytes(path, text);
}

double pct1(double v) { return std::round(v * 1000.0) / 10.0; }

json metrics_json(const AnomalyMetrics& m) {
  return {{"auroc", m.auroc}, {"aupr", m.aupr}, {"fpr95", m.fpr95}, {"pixels", m.pixels}};
}

json miou_json_obj(const MiouReport& r) {
  json per = json::array();
  for (const auto& v : r.per_class) per.push_back(v ? json(pct1(*v)) : json(nullptr));
  return {{"per_class", per},
          {"miou_all", pct1(r.miou_all)},
          {"miou_novel", pct1(r.miou_novel)},
          {"miou_old", pct1(r.miou_old)},
          {"miou_harm", pct1(r.miou_harm)},
          {"notes", r.notes}};
}

std::set<int> range_set(int lo, int hi) {
  std::set<int> s;
  for (int i = lo; i < hi; ++i) s.insert(i);
  return s;
}

LabelMap heat_pgm(const AnomalyMap& m) {
  LabelMap out(m.height(), m.width());
  auto v = m.values.data();
  auto l = out.labels();
  for (std::size_t i = 0; i < l.size(); ++i) l[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i], 0.0, 1.0) * 254.0));
  return out;
}

Tensor3 tensor_from(std::span<const double> v, int c, int h, int w) {
  return Tensor3(c, h, w, std::vector<float>(v.begin(), v.end()));
}

std::vector<double> to_double(const Tensor3& t) { return {t.data().begin(), t.data().end()}; }

void check_tensor(const Tensor3& t, int c, int h, int w, const fs::path& path) {
  if (t.channels() != c || t.height() != h || t.width() != w) {
    throw ShapeError(path.string() + ": expected " + std::to_string(c) + "x" + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

AnomalyMetrics per_image_mean(const std::vector<ScoredPixels>& images) {
  AnomalyMetrics m;
  int n = 0;
  for (const auto& s : images) {
    const auto pos = std::count(s.labels.begin(), s.labels.end(), 1);
    if (pos == 0 || pos == static_cast<long>(s.labels.size())) continue;
    auto e = evaluate_anomaly(s);
    m.auroc += e.auroc;
    m.aupr += e.aupr;
    m.fpr95 += e.fpr95;
    m.pixels += e.pixels;
    ++n;
  }
  if (n == 0) throw PreconditionError("anomaly-score: no test image contains both anomalous and normal pixels");
  m.auroc /= n;
  m.aupr /= n;
  m.fpr95 /= n;
  return m;
}

}  // namespace

// ---------------------------------------------------------------- checkpoints

void save_net(const fs::path& dir, const ToyNetParams& p, const std::string& config_hash, int iters,
              std::uint64_t seed) {
  fs::create_directories(dir);
  const int k9 = 9;
  write_tensor(dir / "conv1_w.tnsr", Tensor3(p.hidden, p.in_channels, k9, p.conv1_w));
  write_tensor(dir / "conv1_b.tnsr", Tensor3(1, 1, p.hidden, p.conv1_b));
  write_tensor(dir / "conv2_w.tnsr", Tensor3(p.features, p.hidden, k9, p.conv2_w));
  write_tensor(dir / "conv2_b.tnsr", Tensor3(1, 1, p.features, p.conv2_b));
  write_tensor(dir / "head_w.tnsr", Tensor3(1, p.outputs, p.features, p.head_w));
  write_tensor(dir / "head_b.tnsr", Tensor3(1, 1, p.outputs, p.head_b));
  write_json(dir / "manifest.json", {{"kind", "toynet"},
                                     {"in_channels", p.in_channels},
                                     {"hidden", p.hidden},
                                     {"features", p.features},
                                     {"outputs", p.outputs},
                                     {"iters", iters},
                                     {"seed", seed},
                                     {"config_hash", config_hash},
                                     {"tensors",
                                      {{"conv1_w", "conv1_w.tnsr"},
                                       {"conv1_b", "conv1_b.tnsr"},
                                       {"conv2_w", "conv2_w.tnsr"},
                                       {"conv2_b", "conv2_b.tnsr"},
                                       {"head_w", "head_w.tnsr"},
                                       {"head_b", "head_b.tnsr"}}}});
}

ToyNetParams load_net(const fs::path& dir, const std::string& producer) {
  const json m = read_json(dir / "manifest.json", producer);
  ToyNetParams p;
  try {
    p.in_channels = m.at("in_channels");
    p.hidden = m.at("hidden");
    p.features = m.at("features");
    p.outputs = m.at("outputs");
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  auto load = [&](const char* name, int c, int h, int w) {
    const fs::path path = dir / (std::string(name) + ".tnsr");
    require(path, producer);
    Tensor3 t = read_tensor(path);
    check_tensor(t, c, h, w, path);
    return std::vector<float>(t.data().begin(), t.data().end());
  };
  p.conv1_w = load("conv1_w", p.hidden, p.in_channels, 9);
  p.conv1_b = load("conv1_b", 1, 1, p.hidden);
  p.conv2_w = load("conv2_w", p.features, p.hidden, 9);
  p.conv2_b = load("conv2_b", 1, 1, p.features);
  p.head_w = load("head_w", 1, p.outputs, p.features);
  p.head_b = load("head_b", 1, 1, p.outputs);
  return p;
}

void save_head(const fs::path& dir, const ProjectionHead& h, const PrototypeBank& bank, const std::string& config_hash,
               int iters, std::uint64_t seed) {
  fs::create_directories(dir);
  write_tensor(dir / "w1.tnsr", tensor_from(h.w1, 1, h.hidden, h.in_dim));
  write_tensor(dir / "b1.tnsr", tensor_from(h.b1, 1, 1, h.hidden));
  write_tensor(dir / "w2.tnsr", tensor_from(h.w2, 1, h.out_dim, h.hidden));
  write_tensor(dir / "b2.tnsr", tensor_from(h.b2, 1, 1, h.out_dim));
  std::vector<double> protos;
  json classes = json::array(), counts = json::array();
  for (const auto& [cls, v] : bank.known) {
    protos.insert(protos.end(), v.begin(), v.end());
    classes.push_back(cls);
    counts.push_back(bank.counts.at(cls));
  }
  write_tensor(dir / "prototypes.tnsr", tensor_from(protos, 1, static_cast<int>(bank.known.size()), h.out_dim));
  write_json(dir / "manifest.json", {{"kind", "projection_head"},
                                     {"in_dim", h.in_dim},
                                     {"hidden", h.hidden},
                                     {"out_dim", h.out_dim},
                                     {"iters", iters},
                                     {"seed", seed},
                                     {"config_hash", config_hash},
                                     {"prototype_classes", classes},
                                     {"prototype_counts", counts}});
}

ProjectionHead load_head(const fs::path& dir, const std::string& producer) {
  const json m = read_json(dir / "manifest.json", producer);
  ProjectionHead h;
  h.in_dim = m.at("in_dim");
  h.hidden = m.at("hidden");
  h.out_dim = m.at("out_dim");
  auto load = [&](const char* name, int rows, int cols) {
    const fs::path path = dir / (std::string(name) + ".tnsr");
    require(path, producer);
    Tensor3 t = read_tensor(path);
    check_tensor(t, 1, rows, cols, path);
    return to_double(t);
  };
  h.w1 = load("w1", h.hidden, h.in_dim);
  h.b1 = load("b1", 1, h.hidden);
  h.w2 = load("w2", h.out_dim, h.hidden);
  h.b2 = load("b2", 1, h.out_dim);
  h.validate();
  return h;
}

PrototypeBank load_prototypes(const fs::path& dir, const std::string& producer) {
  const json m = read_json(dir / "manifest.json", producer);
  const auto classes = m.at("prototype_classes").get<std::vector<int>>();
  const auto counts = m.at("prototype_counts").get<std::vector<int>>();
  const int dim = m.at("out_dim");
  const fs::path path = dir / "prototypes.tnsr";
  require(path, producer);
  Tensor3 t = read_tensor(path);
  check_tensor(t, 1, static_cast<int>(classes.size()), dim, path);
  PrototypeBank bank;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    auto row = t.data().subspan(i * dim, dim);
    bank.known[classes[i]] = Embedding(row.begin(), row.end());
    bank.counts[classes[i]] = counts.at(i);
  }
  return bank;
}

void write_regions(const fs::path& path, const RegionSet& regions, const std::string& comment) {
  if (regions.size() >= LabelMap::kIgnore) throw PreconditionError("write_regions: more than 254 regions");
  LabelMap map(regions.height, regions.width, 0);
  auto l = map.labels();
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& m = regions.regions[r];
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.at(i)) l[i] = static_cast<std::uint8_t>(r + 1);
    }
  }
  write_label_pgm(path, map, comment);
}

RegionSet read_regions(const fs::path& path) {
  LabelMap map = read_label_pgm(path);
  RegionSet rs;
  rs.height = map.height();
  rs.width = map.width();
  int max_id = 0;
  for (auto v : map.labels()) max_id = std::max<int>(max_id, v);
  rs.regions.assign(max_id, BitMask(rs.height, rs.width));
  auto l = map.labels();
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (l[i] != 0) rs.regions[l[i] - 1].set(i);
  }
  for (const auto& r : rs.regions) {
    if (!r.any()) throw FormatError(path.string() + ": region ids are not contiguous");
  }
  return rs;
}

std::vector<std::vector<std::size_t>> select_shots(const Dataset& data, const RunConfig& cfg) {
  const int n_known = cfg.data.spec.num_known();
  std::vector<std::vector<std::size_t>> out;
  for (int m = 0; m < cfg.fewshot.M; ++m) {
    const int cls = n_known + m;
    std::vector<std::pair<std::size_t, std::size_t>> cand;  // (area, index)
    for (std::size_t i = 0; i < data.scenes.size(); ++i) {
      if (data.scenes[i].split != "train") continue;
      const std::size_t area = class_mask(data.scenes[i].scene.gt, cls).count();
      if (area >= static_cast<std::size_t>(cfg.urs.min_region_area)) cand.emplace_back(area, i);
    }
    if (cand.size() < static_cast<std::size_t>(cfg.fewshot.L)) {
      throw PreconditionError("select_shots: only " + std::to_string(cand.size()) + " training scenes contain class " +
                              std::to_string(cls) + ", need L=" + std::to_string(cfg.fewshot.L));
    }
    if (cfg.shots.selection == ShotSelection::kLargest) {
      std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    } else {
      Rng rng(cfg.shots.seed + static_cast<std::uint64_t>(m));
      for (std::size_t i = cand.size(); i > 1; --i) std::swap(cand[i - 1], cand[rng.below(i)]);
    }
    std::vector<std::size_t> idx;
    for (int k = 0; k < cfg.fewshot.L; ++k) idx.push_back(cand[k].second);
    out.push_back(idx);
  }
  return out;
}

std::string miou_to_json(const MiouReport& rep, int indent) { return miou_json_obj(rep).dump(indent); }

// ---------------------------------------------------------------- stages

void stage_gen_data(const RunConfig& cfg) {
  Dataset d = generate_dataset(cfg.data.spec, cfg.data.scenes);
  write_dataset(cfg.paths.data, d, config_hash(cfg));
  log(kGenData, std::to_string(d.scenes.size()) + " scenes written to " + cfg.paths.data.string());
}

void stage_train_closed(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  const int n = cfg.data.spec.num_known();
  auto train = d.split("train");
  auto samples = closed_samples(train, n);
  ToyNetParams init = ToyNetParams::init(3, cfg.net.hidden, cfg.net.features, n, cfg.net.seed);
  TrainLog tlog;
  ToyNetParams net = train_closed(samples, init, cfg.closed_train, &tlog);
  save_net(closed_dir(cfg), net, hash, cfg.closed_train.iters, cfg.closed_train.seed);
  write_log(cfg.paths.output / "closed_train_log.jsonl", tlog);

  auto caches = forward_all(net, train);
  ConfusionMatrix cm(n);
  std::uint64_t correct = 0, total = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    LabelMap pred = predict_labels(caches[i].logits, n);
    cm.add(pred, samples[i].labels);
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (samples[i].labels.labels()[p] == LabelMap::kIgnore) continue;
      ++total;
      correct += pred.labels()[p] == samples[i].labels.labels()[p];
    }
  }
  MiouReport rep = miou(cm, range_set(0, n), {});
  const double acc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  write_json(cfg.paths.output / "closed_train_metrics.json",
             {{"config_hash", hash},
              {"train_pixel_accuracy", acc},
              {"train_miou_known", rep.miou_old},
              {"final_loss", tlog.entries.empty() ? 0.0 : tlog.entries.back().loss.total}});
  log(kTrainClosed, "train mIoU (known) " + std::to_string(rep.miou_old) + ", pixel accuracy " + std::to_string(acc));
}

void stage_embed_train(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  ToyNetParams net = load_net(closed_dir(cfg), kTrainClosed);
  const int n = cfg.data.spec.num_known();
  auto train = d.split("train");
  auto caches = forward_all(net, train);
  std::vector<LabelMap> labels;
  for (const auto* s : train) labels.push_back(closed_labels(s->scene.gt, n));

  // One training region per connected instance of every known class.
  std::vector<std::vector<PooledRegion>> per_scene(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    for (int c = 0; c < n; ++c) {
      RegionSet comps = connected_components(class_mask(labels[i], c), Connectivity::kFour, cfg.urs.min_region_area);
      for (const auto& r : comps.regions) per_scene[i].push_back({region_pool(caches[i].features, r), c});
    }
  });
  std::vector<PooledRegion> regions;
  for (auto& v : per_scene) regions.insert(regions.end(), v.begin(), v.end());

  ProjectionHead head = ProjectionHead::init(net.features, cfg.embedding.hidden, cfg.embedding.out_dim, cfg.embedding.seed);
  HeadTrainLog hlog;
  head = train_head(regions, head, cfg.circle, cfg.head_train, &hlog);
  // Prototypes use the stored (f32) head so later stages see identical values.
  for (auto* v : {&head.w1, &head.b1, &head.w2, &head.b2}) {
    for (double& x : *v) x = static_cast<double>(static_cast<float>(x));
  }
  std::vector<LabeledFeatures> lf;
  for (std::size_t i = 0; i < train.size(); ++i) lf.push_back({&caches[i].features, &labels[i]});
  PrototypeBank bank = known_prototypes(lf, head, n);
  save_head(head_dir(cfg), head, bank, hash, cfg.head_train.iters, cfg.head_train.seed);

  std::string text;
  for (std::size_t i = 0; i < hlog.loss.size(); ++i) text += json({{"iter", i}, {"loss", hlog.loss[i]}}).dump() + "\n";
  write_file_bytes(cfg.paths.output / "head_train_log.jsonl", text);
  log(kEmbedTrain, std::to_string(regions.size()) + " training regions, final loss " +
                       (hlog.loss.empty() ? std::string("n/a") : std::to_string(hlog.loss.back())));
}

void stage_separate(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  ToyNetParams net = load_net(closed_dir(cfg), kTrainClosed);
  auto test = d.split("test");
  std::vector<RegionSet> sets(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    ForwardCache<float> c = forward(net, test[i]->scene.image);
    sets[i] = separate_regions(test[i]->scene.image, c.logits, cfg.urs);
  });
  fs::create_directories(regions_dir(cfg));
  json index = json::array();
  for (std::size_t i = 0; i < test.size(); ++i) {
    sets[i].height = test[i]->scene.gt.height();
    sets[i].width = test[i]->scene.gt.width();
    const std::string file = test[i]->id + "_regions.pgm";
    write_regions(regions_dir(cfg) / file, sets[i], hash_comment(hash));
    index.push_back({{"id", test[i]->id}, {"file", file}, {"regions", sets[i].size()}});
  }
  write_json(regions_dir(cfg) / "index.json", {{"config_hash", hash}, {"scenes", index}});
  log(kSeparate, "regions written for " + std::to_string(test.size()) + " test scenes");
}

AnomalyReport stage_anomaly_score(const RunConfig& cfg, bool with_maxlogit) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  ToyNetParams net = load_net(closed_dir(cfg), kTrainClosed);
  ProjectionHead head = load_head(head_dir(cfg), kEmbedTrain);
  PrototypeBank bank = load_prototypes(head_dir(cfg), kEmbedTrain);
  const int n = cfg.data.spec.num_known();
  auto test = d.split("test");
  for (const auto* s : test) require(regions_dir(cfg) / (s->id + "_regions.pgm"), kSeparate);

  std::vector<AnomalyMap> raml_maps(test.size()), ml_maps(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    ForwardCache<float> c = forward(net, test[i]->scene.image);
    RegionSet rs = read_regions(regions_dir(cfg) / (test[i]->id + "_regions.pgm"));
    raml_maps[i] = score_regions(c.features, c.logits, rs, head, bank);
    if (with_maxlogit) ml_maps[i] = maxlogit_map(c.logits);
  });

  fs::create_directories(anomaly_dir(cfg));
  ScoredPixels pooled_raml, pooled_ml;
  std::vector<ScoredPixels> img_raml, img_ml;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::vector<std::uint8_t> gt;
    for (auto v : test[i]->scene.gt.labels()) gt.push_back(v != LabelMap::kIgnore && v >= n ? 1 : 0);
    write_label_pgm(anomaly_dir(cfg) / (test[i]->id + "_raml.pgm"), heat_pgm(raml_maps[i]), hash_comment(hash));
    write_tensor(anomaly_dir(cfg) / (test[i]->id + "_raml.tnsr"), Tensor3(raml_maps[i].values));
    pooled_raml.append(raml_maps[i].values.data(), gt);
    img_raml.emplace_back();
    img_raml.back().append(raml_maps[i].values.data(), gt);
    if (with_maxlogit) {
      write_label_pgm(anomaly_dir(cfg) / (test[i]->id + "_maxlogit.pgm"), heat_pgm(ml_maps[i]), hash_comment(hash));
      pooled_ml.append(ml_maps[i].values.data(), gt);
      img_ml.emplace_back();
      img_ml.back().append(ml_maps[i].values.data(), gt);
    }
  }
  AnomalyReport rep;
  rep.raml = cfg.metrics.per_image ? per_image_mean(img_raml) : evaluate_anomaly(pooled_raml);
  json out = {{"config_hash", hash},
              {"averaging", cfg.metrics.per_image ? "per_image" : "pooled"},
              {"raml", metrics_json(rep.raml)}};
  if (with_maxlogit) {
    rep.maxlogit = cfg.metrics.per_image ? per_image_mean(img_ml) : evaluate_anomaly(pooled_ml);
    out["maxlogit"] = metrics_json(*rep.maxlogit);
  }
  write_json(cfg.paths.output / "anomaly_metrics.json", out);
  log("anomaly-score", "RAML AUROC " + std::to_string(rep.raml.auroc) +
                           (with_maxlogit ? ", MaxLogit AUROC " + std::to_string(rep.maxlogit->auroc) : ""));
  return rep;
}

void stage_mca_finetune(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  ToyNetParams closed = load_net(closed_dir(cfg), kTrainClosed);
  const int n = cfg.data.spec.num_known();
  auto shots = select_shots(d, cfg);

  json classes = json::array();
  std::vector<TrainSample> shot_closed, shot_novel;
  for (int m = 0; m < cfg.fewshot.M; ++m) {
    json ids = json::array();
    for (std::size_t idx : shots[m]) {
      const auto& s = d.scenes[idx];
      ids.push_back(s.id);
      // Meta-channel fine-tuning: the shot's novel pixels target the meta channels as a group.
      LabelMap ml = closed_labels(s.scene.gt, n);
      for (std::size_t p = 0; p < ml.size(); ++p) {
        if (s.scene.gt.labels()[p] >= n) ml.labels()[p] = LabelMap::kUnknown;
      }
      shot_closed.push_back({s.scene.image, ml});
      // Naive baseline labels: only this shot's novel pixels are supervised.
      LabelMap nl(s.scene.gt.height(), s.scene.gt.width(), LabelMap::kIgnore);
      for (std::size_t p = 0; p < nl.size(); ++p) {
        if (s.scene.gt.labels()[p] == n + m) nl.labels()[p] = static_cast<std::uint8_t>(n + m);
      }
      shot_novel.push_back({s.scene.image, nl});
    }
    classes.push_back({{"class", n + m}, {"name", d.class_names.at(n + m)}, {"shots", ids}});
  }
  write_json(cfg.paths.output / "shots.json", {{"config_hash", hash}, {"classes", classes}});

  auto regular = closed_samples(d.split("train"), n);
  FinetuneData data{regular, shot_closed, cfg.shots.period};
  TrainLog mlog;
  ToyNetParams mca = finetune_mca(closed, data, cfg.mca, cfg.mca_train, n, &mlog);
  save_net(mca_dir(cfg), mca, hash, cfg.mca_train.iters, cfg.mca_train.seed);
  write_log(cfg.paths.output / "mca_train_log.jsonl", mlog);

  TrainLog flog;
  ToyNetParams ft = finetune_naive(closed, shot_novel, cfg.fewshot.M, cfg.ft_train, &flog);
  save_net(ft_dir(cfg), ft, hash, cfg.ft_train.iters, cfg.ft_train.seed);
  write_log(cfg.paths.output / "ft_train_log.jsonl", flog);
  log(kMcaFinetune, "meta-channel model and naive fine-tune baseline written");
}

void stage_fewshot(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  Dataset d = load_data(cfg);
  ToyNetParams closed = load_net(closed_dir(cfg), kTrainClosed);
  ToyNetParams mca = load_net(mca_dir(cfg), kMcaFinetune);
  ToyNetParams ft = load_net(ft_dir(cfg), kMcaFinetune);
  ProjectionHead head = load_head(head_dir(cfg), kEmbedTrain);
  const int n = cfg.data.spec.num_known();
  if (mca.outputs != n + cfg.mca.K) throw ShapeError("fewshot: meta-channel checkpoint width differs from N + K");

  // Shots as recorded by mca-finetune.
  const json shots_json = read_json(cfg.paths.output / "shots.json", kMcaFinetune);
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) by_id[d.scenes[i].id] = i;
  std::vector<std::vector<std::size_t>> shot_idx;
  for (const auto& c : shots_json.at("classes")) {
    std::vector<std::size_t> v;
    for (const auto& id : c.at("shots")) {
      auto it = by_id.find(id.get<std::string>());
      if (it == by_id.end()) throw FormatError("shots.json: unknown scene " + id.get<std::string>());
      v.push_back(it->second);
    }
    shot_idx.push_back(v);
  }
  if (static_cast<int>(shot_idx.size()) != cfg.fewshot.M) throw FormatError("shots.json: class count differs from M");

  // Shot features (closed backbone, which the head was trained on), masks and
  // meta outputs.
  std::vector<std::vector<Tensor3>> shot_feat(shot_idx.size());
  std::vector<std::vector<BitMask>> shot_mask(shot_idx.size());
  std::vector<std::vector<MetaOutput>> shot_meta(shot_idx.size());
  for (std::size_t m = 0; m < shot_idx.size(); ++m) {
    for (std::size_t idx : shot_idx[m]) {
      const auto& s = d.scenes[idx].scene;
      shot_feat[m].push_back(forward(closed, s.image).features);
      shot_mask[m].push_back(class_mask(s.gt, n + static_cast<int>(m)));
      shot_meta[m].push_back(activate(Tensor3d(forward(mca, s.image).logits), cfg.mca.activation));
    }
  }
  std::vector<std::vector<Shot>> shots(shot_idx.size());
  std::vector<AnnotatedShot> annotated;
  for (std::size_t m = 0; m < shot_idx.size(); ++m) {
    for (std::size_t k = 0; k < shot_idx[m].size(); ++k) {
      shots[m].push_back({&shot_feat[m][k], &shot_mask[m][k], d.scenes[shot_idx[m][k]].id});
      annotated.push_back({&shot_meta[m][k], &shot_mask[m][k]});
    }
  }
  NovelPrototypes protos = novel_prototypes(shots, head);
  const std::set<int> candidates = select_candidates(annotated, n, cfg.mca);

  auto test = d.split("test");
  std::vector<LabelMap> raml_pred(test.size()), ft_pred(test.size()), closed_pred(test.size());
  std::vector<json> decisions(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    const Tensor3& image = test[i]->scene.image;
    ForwardCache<float> c = forward(closed, image);
    closed_pred[i] = predict_labels(c.logits, n);
    MetaOutput meta = activate(Tensor3d(forward(mca, image).logits), cfg.mca.activation);
    RegionSet rs = mca_regions(meta, candidates, n, cfg.urs.connectivity, cfg.urs.min_region_area);
    std::vector<std::optional<int>> dec;
    json rj = json::array();
    for (const auto& r : rs.regions) {
      Embedding e = embed_region(c.features, r, head);
      auto sims = region_similarities(e, protos);
      dec.push_back(classify_region(sims, cfg.fewshot.theta_novel));
      rj.push_back({{"area", r.count()},
                    {"similarities", sims},
                    {"class", dec.back() ? json(n + *dec.back()) : json(nullptr)}});
    }
    rs.height = image.height();
    rs.width = image.width();
    raml_pred[i] = assemble_segmentation(closed_pred[i], rs, dec, n);
    ft_pred[i] = predict_labels(forward(ft, image).logits, n + cfg.fewshot.M);
    decisions[i] = {{"id", test[i]->id}, {"regions", rj}};
  });

  fs::create_directories(fewshot_dir(cfg));
  for (std::size_t i = 0; i < test.size(); ++i) {
    write_label_pgm(fewshot_dir(cfg) / (test[i]->id + "_raml.pgm"), raml_pred[i], hash_comment(hash));
    write_label_pgm(fewshot_dir(cfg) / (test[i]->id + "_ft.pgm"), ft_pred[i], hash_comment(hash));
    write_label_pgm(fewshot_dir(cfg) / (test[i]->id + "_closed.pgm"), closed_pred[i], hash_comment(hash));
  }
  write_json(fewshot_dir(cfg) / "decisions.json",
             {{"config_hash", hash},
              {"candidate_channels", std::vector<int>(candidates.begin(), candidates.end())},
              {"scenes", decisions}});
  log(kFewshot, std::to_string(candidates.size()) + " candidate meta channels; predictions for " +
                    std::to_string(test.size()) + " test scenes");
}

MiouReport evaluate_predictions(const RunConfig& cfg, const fs::path& pred_dir, const std::string& suffix) {
  Dataset d = load_data(cfg);
  const int n = cfg.data.spec.num_known();
  const int total = cfg.data.spec.num_classes();
  ConfusionMatrix cm(total);
  for (const auto* s : d.split("test")) {
    const fs::path path = pred_dir / (s->id + suffix);
    require(path, kFewshot);
    cm.add(read_label_pgm(path), s->scene.gt);
  }
  return miou(cm, range_set(0, n), range_set(n, total));
}

EvalReport stage_evaluate(const RunConfig& cfg) {
  const std::string hash = config_hash(cfg);
  EvalReport rep;
  rep.raml = evaluate_predictions(cfg, fewshot_dir(cfg), "_raml.pgm");
  rep.finetune = evaluate_predictions(cfg, fewshot_dir(cfg), "_ft.pgm");
  rep.closed = evaluate_predictions(cfg, fewshot_dir(cfg), "_closed.pgm");
  write_json(cfg.paths.output / "eval_metrics.json", {{"config_hash", hash},
                                                      {"raml", miou_json_obj(rep.raml)},
                                                      {"finetune", miou_json_obj(rep.finetune)},
                                                      {"closed", miou_json_obj(rep.closed)}});
  log("evaluate", "RAML mIoU novel " + std::to_string(rep.raml.miou_novel) + " old " +
                      std::to_string(rep.raml.miou_old) + "; fine-tune novel " + std::to_string(rep.finetune.miou_novel) +
                      "; closed old " + std::to_string(rep.closed.miou_old));
  return rep;
}

GradCheckReport stage_grad_check(const RunConfig& cfg) {
  GradCheckReport rep = run_grad_checks(cfg.grad_check);
  json entries = json::array();
  for (const auto& e : rep.entries) {
    entries.push_back({{"name", e.name},
                       {"seed", e.seed},
                       {"coordinates", e.coordinates},
                       {"max_relative_error", e.max_relative_error}});
  }
  write_json(cfg.paths.output / "grad_check.json", {{"config_hash", config_hash(cfg)},
                                                    {"tolerance", cfg.grad_check.tolerance},
                                                    {"worst", rep.worst},
                                                    {"pass", rep.pass},
                                                    {"entries", entries}});
  log("grad-check", std::string(rep.pass ? "pass" : "FAIL") + ", worst relative error " + std::to_string(rep.worst));
  return rep;
}

bool run_all(const RunConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto timed = [](const char* name, auto&& fn) {
    const auto t0 = clock::now();
    fn();
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f s", s);
    log(name, buf);
  };
  timed(kGenData, [&] { stage_gen_data(cfg); });
  timed(kTrainClosed, [&] { stage_train_closed(cfg); });
  timed(kEmbedTrain, [&] { stage_embed_train(cfg); });
  timed(kSeparate, [&] { stage_separate(cfg); });
  timed("anomaly-score", [&] { stage_anomaly_score(cfg, true); });
  timed(kMcaFinetune, [&] { stage_mca_finetune(cfg); });
  timed(kFewshot, [&] { stage_fewshot(cfg); });
  timed("evaluate", [&] { stage_evaluate(cfg); });
  bool ok = true;
  timed("grad-check", [&] { ok = stage_grad_check(cfg).pass; });
  return ok;
}

}  // namespace raml
