#include "raml/config.hpp"

#include <cstdio>

#include "json.hpp"

#include "raml/tensor_io.hpp"

namespace raml {

namespace {

using json = nlohmann::json;

std::string msp_name(MspMode m) { return m == MspMode::kUncertainty ? "uncertainty" : "literal"; }
std::string activation_name(MetaActivation a) {
  return a == MetaActivation::kSigmoidPerChannel ? "sigmoid" : "softmax_all";
}
std::string candidate_name(CandidateMode m) { return m == CandidateMode::kLiteral ? "literal" : "intersect"; }
std::string selection_name(ShotSelection s) { return s == ShotSelection::kLargest ? "largest" : "random"; }

template <typename E>
E parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
  const std::string v = j.at(key).get<std::string>();
  std::string allowed;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  throw FormatError(std::string("config: ") + key + " = '" + v + "' (expected one of " + allowed + ")");
}

json sgd_json(const SgdConfig& s) {
  return {{"lr", s.lr0}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay}, {"poly_power", s.poly_power}};
}
SgdConfig sgd_from(const json& j) {
  return {j.at("lr").get<double>(), j.at("momentum").get<double>(), j.at("weight_decay").get<double>(),
          j.at("poly_power").get<double>()};
}

json train_json(const TrainConfig& t) {
  json j = sgd_json(t.sgd);
  j["iters"] = t.iters;
  j["batch"] = t.batch;
  j["seed"] = t.seed;
  j["clip_norm"] = t.clip_norm;
  return j;
}
TrainConfig train_from(const json& j) {
  TrainConfig t;
  t.sgd = sgd_from(j);
  t.iters = j.at("iters");
  t.batch = j.at("batch");
  t.seed = j.at("seed");
  t.clip_norm = j.at("clip_norm");
  return t;
}

json to_json(const RunConfig& c) {
  json shapes_known = json::array(), shapes_novel = json::array();
  for (auto k : c.data.spec.known) shapes_known.push_back(shape_name(k));
  for (auto k : c.data.spec.novel) shapes_novel.push_back(shape_name(k));
  const auto& s = c.data.spec;
  json head = sgd_json(c.head_train.sgd);
  head["iters"] = c.head_train.iters;
  head["batch"] = c.head_train.batch;
  head["seed"] = c.head_train.seed;
  return {
      {"paths",
       {{"data", c.paths.data.string()},
        {"checkpoints", c.paths.checkpoints.string()},
        {"output", c.paths.output.string()}}},
      {"data",
       {{"scenes", c.data.scenes},
        {"height", s.height},
        {"width", s.width},
        {"known", shapes_known},
        {"novel", shapes_novel},
        {"min_shapes", s.min_shapes},
        {"max_shapes", s.max_shapes},
        {"novel_probability", s.novel_probability},
        {"size_min", s.size_min},
        {"size_max", s.size_max},
        {"color_jitter", s.color_jitter},
        {"background_jitter", s.background_jitter},
        {"min_region_area", s.min_region_area},
        {"seed", s.seed}}},
      {"net", {{"hidden", c.net.hidden}, {"features", c.net.features}, {"seed", c.net.seed}}},
      {"embedding", {{"hidden", c.embedding.hidden}, {"out_dim", c.embedding.out_dim}, {"seed", c.embedding.seed}}},
      {"urs",
       {{"alpha", c.urs.alpha},
        {"beta", c.urs.beta},
        {"msp_mode", msp_name(c.urs.msp_mode)},
        {"connectivity", static_cast<int>(c.urs.connectivity)},
        {"min_region_area", c.urs.min_region_area}}},
      {"mca",
       {{"K", c.mca.K},
        {"eta", c.mca.eta},
        {"lambda_inter", c.mca.lambda_inter},
        {"lambda_split", c.mca.lambda_split},
        {"lambda_rec", c.mca.lambda_rec},
        {"kappa", c.mca.kappa},
        {"dice_epsilon", c.mca.dice_epsilon},
        {"activation", activation_name(c.mca.activation)},
        {"candidate_mode", candidate_name(c.mca.candidate_mode)},
        {"seg_all_channels", c.mca.seg_all_channels}}},
      {"fewshot", {{"theta_novel", c.fewshot.theta_novel}, {"M", c.fewshot.M}, {"L", c.fewshot.L}}},
      {"circle", {{"gamma", c.circle.gamma}, {"margin", c.circle.margin}}},
      {"closed_train", train_json(c.closed_train)},
      {"head_train", head},
      {"mca_train", train_json(c.mca_train)},
      {"ft_train", train_json(c.ft_train)},
      {"shots", {{"selection", selection_name(c.shots.selection)}, {"seed", c.shots.seed}, {"period", c.shots.period}}},
      {"metrics", {{"per_image", c.metrics.per_image}}},
      {"grad_check",
       {{"seeds", c.grad_check.seeds},
        {"step", c.grad_check.step},
        {"tolerance", c.grad_check.tolerance},
        {"floor", c.grad_check.floor}}},
  };
}

RunConfig from_full_json(const json& j) {
  RunConfig c;
  const auto& p = j.at("paths");
  c.paths.data = p.at("data").get<std::string>();
  c.paths.checkpoints = p.at("checkpoints").get<std::string>();
  c.paths.output = p.at("output").get<std::string>();

  const auto& d = j.at("data");
  c.data.scenes = d.at("scenes");
  auto& s = c.data.spec;
  s.height = d.at("height");
  s.width = d.at("width");
  s.known.clear();
  s.novel.clear();
  for (const auto& k : d.at("known")) s.known.push_back(parse_shape(k));
  for (const auto& k : d.at("novel")) s.novel.push_back(parse_shape(k));
  s.min_shapes = d.at("min_shapes");
  s.max_shapes = d.at("max_shapes");
  s.novel_probability = d.at("novel_probability");
  s.size_min = d.at("size_min");
  s.size_max = d.at("size_max");
  s.color_jitter = d.at("color_jitter");
  s.background_jitter = d.at("background_jitter");
  s.min_region_area = d.at("min_region_area");
  s.seed = d.at("seed");

  c.net.hidden = j.at("net").at("hidden");
  c.net.features = j.at("net").at("features");
  c.net.seed = j.at("net").at("seed");
  c.embedding.hidden = j.at("embedding").at("hidden");
  c.embedding.out_dim = j.at("embedding").at("out_dim");
  c.embedding.seed = j.at("embedding").at("seed");

  const auto& u = j.at("urs");
  c.urs.alpha = u.at("alpha");
  c.urs.beta = u.at("beta");
  c.urs.msp_mode = parse_enum<MspMode>(u, "msp_mode", {{"uncertainty", MspMode::kUncertainty}, {"literal", MspMode::kLiteral}});
  const int conn = u.at("connectivity");
  if (conn != 4 && conn != 8) throw FormatError("config: urs.connectivity must be 4 or 8");
  c.urs.connectivity = conn == 4 ? Connectivity::kFour : Connectivity::kEight;
  c.urs.min_region_area = u.at("min_region_area");

  const auto& m = j.at("mca");
  c.mca.K = m.at("K");
  c.mca.eta = m.at("eta");
  c.mca.lambda_inter = m.at("lambda_inter");
  c.mca.lambda_split = m.at("lambda_split");
  c.mca.lambda_rec = m.at("lambda_rec");
  c.mca.kappa = m.at("kappa");
  c.mca.dice_epsilon = m.at("dice_epsilon");
  c.mca.activation = parse_enum<MetaActivation>(
      m, "activation", {{"sigmoid", MetaActivation::kSigmoidPerChannel}, {"softmax_all", MetaActivation::kSoftmaxAll}});
  c.mca.candidate_mode = parse_enum<CandidateMode>(
      m, "candidate_mode", {{"literal", CandidateMode::kLiteral}, {"intersect", CandidateMode::kIntersect}});
  c.mca.seg_all_channels = m.at("seg_all_channels");

  c.fewshot.theta_novel = j.at("fewshot").at("theta_novel");
  c.fewshot.M = j.at("fewshot").at("M");
  c.fewshot.L = j.at("fewshot").at("L");
  c.circle.gamma = j.at("circle").at("gamma");
  c.circle.margin = j.at("circle").at("margin");

  c.closed_train = train_from(j.at("closed_train"));
  const auto& h = j.at("head_train");
  c.head_train.sgd = sgd_from(h);
  c.head_train.iters = h.at("iters");
  c.head_train.batch = h.at("batch");
  c.head_train.seed = h.at("seed");
  c.mca_train = train_from(j.at("mca_train"));
  c.ft_train = train_from(j.at("ft_train"));

  const auto& sh = j.at("shots");
  c.shots.selection = parse_enum<ShotSelection>(sh, "selection",
                                                {{"largest", ShotSelection::kLargest}, {"random", ShotSelection::kRandom}});
  c.shots.seed = sh.at("seed");
  c.shots.period = sh.at("period");
  c.metrics.per_image = j.at("metrics").at("per_image");
  const auto& g = j.at("grad_check");
  c.grad_check.seeds = g.at("seeds");
  c.grad_check.step = g.at("step");
  c.grad_check.tolerance = g.at("tolerance");
  c.grad_check.floor = g.at("floor");
  return c;
}

// Rejects keys that the defaults do not have.
void check_keys(const json& given, const json& known, const std::string& prefix) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) throw FormatError("config: unknown key '" + key + "'");
    if (it.value().is_object() && known.at(it.key()).is_object()) check_keys(it.value(), known.at(it.key()), key);
  }
}

RunConfig decode(const json& patch) {
  json full = to_json(RunConfig{});
  if (!patch.is_object()) throw FormatError("config: top level must be an object");
  check_keys(patch, full, "");
  full.merge_patch(patch);
  RunConfig c;
  try {
    c = from_full_json(full);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  data.spec.validate();
  if (data.scenes < 1) throw PreconditionError("config: data.scenes must be >= 1");
  if (net.hidden < 1 || net.features < 1) throw PreconditionError("config: net widths must be >= 1");
  if (embedding.hidden < 1 || embedding.out_dim < 1) throw PreconditionError("config: embedding widths must be >= 1");
  urs.validate();
  mca.validate();
  fewshot.validate();
  if (fewshot.M != static_cast<int>(data.spec.novel.size())) {
    throw PreconditionError("config: fewshot.M must equal the number of novel shapes");
  }
  circle.validate();
  for (const TrainConfig* t : {&closed_train, &mca_train, &ft_train}) {
    t->sgd.validate();
    if (t->iters < 0 || t->batch < 1) throw PreconditionError("config: training iters must be >= 0 and batch >= 1");
    if (!(t->clip_norm >= 0.0)) throw PreconditionError("config: clip_norm must be >= 0");
  }
  head_train.sgd.validate();
  if (shots.period < 1) throw PreconditionError("config: shots.period must be >= 1");
  if (grad_check.seeds < 1 || !(grad_check.step > 0.0)) throw PreconditionError("config: bad grad_check settings");
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig config_from_json(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return decode(patch);
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
  try {
    return config_from_json(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  json full = to_json(cfg);
  json::json_pointer ptr;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    ptr /= key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (!full.contains(ptr)) throw FormatError("config: unknown key '" + key + "'");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;  // bare strings such as enum names
  }
  // Comma lists for array-valued keys (known/novel shapes).
  if (full.at(ptr).is_array() && v.is_string()) {
    json arr = json::array();
    std::size_t s = 0;
    const std::string str = v.get<std::string>();
    while (s <= str.size()) {
      const std::size_t comma = str.find(',', s);
      const std::string item = str.substr(s, comma == std::string::npos ? std::string::npos : comma - s);
      if (!item.empty()) arr.push_back(item);
      if (comma == std::string::npos) break;
      s = comma + 1;
    }
    v = arr;
  }
  full[ptr] = v;
  RunConfig out;
  try {
    out = from_full_json(full);
  } catch (const json::exception& e) {
    throw FormatError("config: bad value for '" + key + "': " + e.what());
  }
  out.validate();
  cfg = out;
}

std::string config_hash(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("paths");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace raml
