#include "cli.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "semmask/masking.hpp"
#include "semmask/pointcloud_io.hpp"
#include "semmask/recon_metrics.hpp"
#include "semmask/rng.hpp"
#include "semmask/semantic_head.hpp"
#include "semmask/toy_pipeline.hpp"
#include "semmask/voxelizer.hpp"

extern char **environ;

namespace semmask::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char *kVersion = "0.1.0";

// Root-seed streams.
constexpr std::uint64_t kSceneStream = 1;
constexpr std::uint64_t kModelStream = 2;
constexpr std::uint64_t kMaskStream = 3;
constexpr std::uint64_t kImageStream = 4;
constexpr std::uint64_t kEvalStream = 5;

enum class Kind { U64, F64, Str, Flag, StrList, U64List, F64List, Vec3 };

enum Section : unsigned {
  kGlobal = 1U << 0,
  kInput = 1U << 1,
  kPolicy = 1U << 2,
  kModel = 1U << 3,
  kAnalysis = 1U << 4,
  kCompare = 1U << 5,
  kReport = 1U << 6,
};

struct KeySpec {
  const char *key;
  const char *flag;
  Kind kind;
  unsigned sections;
  const char *default_value;  // nullptr: no default
  const char *help;
};

const std::vector<KeySpec> &key_table() {
  static const std::vector<KeySpec> table = {
      {"seed", "--seed", Kind::U64, kGlobal, nullptr, "root seed (required by randomized commands)"},
      {"out", "--out", Kind::Str, kGlobal, nullptr, "output directory"},
      {"dry_run", "--dry-run", Kind::Flag, kGlobal, "false", "echo the merged config and exit"},

      {"scene_spec", "--scene-spec", Kind::StrList, kInput, nullptr, "synthetic scene spec JSON (repeatable)"},
      {"scan", "--scan", Kind::Str, kInput, nullptr, "LiDAR scan (.bin, little-endian float32)"},
      {"labels", "--labels", Kind::Str, kInput, nullptr, "per-point lidarseg labels (.bin, uint8)"},
      {"layout", "--layout", Kind::Str, kInput, "\"xyzir5\"", "scan record layout: xyzi4 or xyzir5"},
      {"class_map", "--class-map", Kind::Str, kInput, nullptr, "raw to detection class map JSON"},
      {"voxel_size", "--voxel-size", Kind::Vec3, kInput, nullptr, "voxel edge lengths x,y,z"},
      {"range_min", "--range-min", Kind::Vec3, kInput, nullptr, "grid range lower corner x,y,z"},
      {"range_max", "--range-max", Kind::Vec3, kInput, nullptr, "grid range upper corner x,y,z"},
      {"max_points_per_voxel", "--max-points-per-voxel", Kind::U64, kInput, "0", "point cap per voxel (0: none)"},
      {"policy_file", "--policy-file", Kind::Str, kInput, nullptr, "policy.json with importance levels and weights"},

      {"policy", "--policy", Kind::Str, kPolicy, "\"uniform\"", "uniform, class-target or importance"},
      {"rho", "--rho", Kind::F64, kPolicy, "0.7", "masking ratio"},
      {"tau", "--tau", Kind::U64, kPolicy, "1", "class-target point threshold"},
      {"class", "--class", Kind::Str, kPolicy, nullptr, "class-target class name"},
      {"weights", "--weights", Kind::Str, kPolicy, nullptr, "high=..,medium=..,low=..,background=.."},
      {"strict_budget", "--strict-budget", Kind::Flag, kPolicy, "false", "fail when the target set exceeds the budget"},

      {"steps", "--steps", Kind::U64, kModel, "200", "training steps"},
      {"learning_rate", "--learning-rate", Kind::F64, kModel, "0.05", "gradient descent step size"},
      {"points_per_voxel_out", "--points-per-voxel", Kind::U64, kModel, "8", "predicted points per voxel"},
      {"encoder_hidden", "--encoder-hidden", Kind::U64, kModel, "32", "encoder width"},
      {"lambda_sem", "--lambda-sem", Kind::F64, kModel, "0.25", "semantic loss weight"},
      {"semantic", "--semantic", Kind::Str, kModel, "\"on\"", "semantic branch: on or off"},
      {"label_source", "--label-source", Kind::Str, kModel, "\"mapped\"", "semantic supervision: mapped or raw"},
      {"chamfer_variant", "--chamfer-variant", Kind::Str, kModel, "\"euclidean\"", "euclidean or squared"},

      {"seeds", "--seeds", Kind::U64List, kAnalysis, nullptr, "masking seeds for analysis and evaluation"},
      {"classes", "--classes", Kind::StrList, kAnalysis, nullptr, "classes to analyze (default: all present)"},
      {"include_occupancy", "--include-occupancy", Kind::Flag, kAnalysis, "false", "rank occupancy accuracy too"},
      {"aggregation", "--aggregation", Kind::Str, kAnalysis, "\"per_voxel\"", "per_voxel or global"},
      {"metrics_csv", "--metrics-csv", Kind::Str, kAnalysis, nullptr, "rank precomputed per-class metrics"},
      {"retrain_per_class", "--retrain-per-class", Kind::Flag, kAnalysis, "false", "train one model per class"},
      {"high_threshold", "--high-threshold", Kind::F64, kAnalysis, "7.5", "mean rank for High"},
      {"medium_threshold", "--medium-threshold", Kind::F64, kAnalysis, "5.0", "mean rank for Medium"},

      {"policies", "--policies", Kind::StrList, kCompare, "[\"uniform\",\"importance\"]", "policies to compare"},
      {"lambdas", "--lambdas", Kind::F64List, kCompare, "[0.25]", "semantic loss weights to sweep"},

      {"report_csv", "--report-csv", Kind::Str, kReport, nullptr, "importance_report.csv to display"},
  };
  return table;
}

const KeySpec *find_key(const std::string &key) {
  for (const auto &k : key_table()) {
    if (key == k.key) return &k;
  }
  return nullptr;
}

std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

std::vector<std::string> split_commas(const std::string &s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

std::uint64_t parse_u64(const std::string &s, const std::string &what) {
  std::uint64_t v = 0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
    throw Error(ErrorCode::InvalidArgument, what + " expects an unsigned integer, got '" + s + "'");
  }
  return v;
}

double parse_f64(const std::string &s, const std::string &what) {
  const auto t = trim(s);
  char *end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::InvalidArgument, what + " expects a finite number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string &s, const std::string &what) {
  std::string t = trim(s);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw Error(ErrorCode::InvalidArgument, what + " expects a boolean, got '" + s + "'");
}

/// Canonical JSON for a value given as text (flags, environment).
json from_text(const KeySpec &k, const std::string &text, const std::string &what) {
  switch (k.kind) {
    case Kind::U64: return parse_u64(text, what);
    case Kind::F64: return parse_f64(text, what);
    case Kind::Str: return text;
    case Kind::Flag: return parse_bool(text, what);
    case Kind::StrList: return split_commas(text);
    case Kind::U64List: {
      json a = json::array();
      for (const auto &p : split_commas(text)) a.push_back(parse_u64(p, what));
      return a;
    }
    case Kind::F64List: {
      json a = json::array();
      for (const auto &p : split_commas(text)) a.push_back(parse_f64(p, what));
      return a;
    }
    case Kind::Vec3: {
      const auto parts = split_commas(text);
      if (parts.size() != 3) throw Error(ErrorCode::InvalidArgument, what + " expects x,y,z");
      return json::array({parse_f64(parts[0], what), parse_f64(parts[1], what), parse_f64(parts[2], what)});
    }
  }
  return nullptr;
}

/// Canonical JSON for a value read from a config file.
json from_file_value(const KeySpec &k, const json &v, const std::string &what) {
  if (v.is_string()) return from_text(k, v.get<std::string>(), what);
  auto bad = [&]() { return Error(ErrorCode::ParseError, what + " has the wrong type"); };
  switch (k.kind) {
    case Kind::U64:
      if (!v.is_number_unsigned()) throw bad();
      return v;
    case Kind::F64:
      if (!v.is_number()) throw bad();
      return v.get<double>();
    case Kind::Str: throw bad();
    case Kind::Flag:
      if (!v.is_boolean()) throw bad();
      return v;
    case Kind::StrList:
    case Kind::U64List:
    case Kind::F64List:
    case Kind::Vec3: {
      if (!v.is_array()) throw bad();
      json a = json::array();
      for (const auto &e : v) {
        if (k.kind == Kind::StrList) {
          if (!e.is_string()) throw bad();
          a.push_back(e);
        } else if (k.kind == Kind::U64List) {
          if (!e.is_number_unsigned()) throw bad();
          a.push_back(e);
        } else {
          if (!e.is_number()) throw bad();
          a.push_back(e.get<double>());
        }
      }
      if (k.kind == Kind::Vec3 && a.size() != 3) throw bad();
      return a;
    }
  }
  return nullptr;
}

std::string env_name(const std::string &key) {
  std::string name = "SEMMASK_";
  for (char c : key) name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return name;
}

json read_json_file(const fs::path &path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error &e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

std::string read_file_bytes(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Merged run configuration: defaults < config file < environment < flags.
class RunConfig {
 public:
  RunConfig(unsigned sections, const std::optional<std::string> &config_path,
            const std::map<std::string, std::string> &env, const std::map<std::string, json> &flags) {
    for (const auto &k : key_table()) {
      if ((k.sections & sections) == 0 || k.default_value == nullptr) continue;
      values_[k.key] = json::parse(k.default_value);
    }
    if (config_path) {
      json file = read_json_file(*config_path);
      if (file.is_object() && file.contains("config") && file.contains("command")) file = file["config"];
      if (!file.is_object()) throw Error(ErrorCode::ParseError, *config_path + ": config must be a JSON object");
      for (const auto &[key, value] : file.items()) {
        const KeySpec *k = find_key(key);
        if (k == nullptr) throw Error(ErrorCode::ParseError, *config_path + ": unknown key '" + key + "'");
        if ((k->sections & sections) == 0) continue;
        values_[key] = from_file_value(*k, value, *config_path + ": " + key);
      }
    }
    for (const auto &k : key_table()) {
      if ((k.sections & sections) == 0) continue;
      auto it = env.find(env_name(k.key));
      if (it != env.end()) values_[k.key] = from_text(k, it->second, env_name(k.key));
    }
    for (const auto &[key, value] : flags) values_[key] = value;
  }

  const json &values() const { return values_; }
  bool has(const std::string &key) const { return values_.contains(key); }

  std::uint64_t u64(const std::string &key) const { return at(key).get<std::uint64_t>(); }
  double f64(const std::string &key) const { return at(key).get<double>(); }
  std::string str(const std::string &key) const { return at(key).get<std::string>(); }
  bool flag(const std::string &key) const { return has(key) && at(key).get<bool>(); }
  std::vector<std::string> strs(const std::string &key) const {
    return has(key) ? at(key).get<std::vector<std::string>>() : std::vector<std::string>{};
  }
  std::vector<std::uint64_t> u64s(const std::string &key) const { return at(key).get<std::vector<std::uint64_t>>(); }
  std::vector<double> f64s(const std::string &key) const { return at(key).get<std::vector<double>>(); }
  Vec3 vec3(const std::string &key) const {
    const auto v = at(key).get<std::vector<double>>();
    return {v[0], v[1], v[2]};
  }

  std::uint64_t seed() const {
    if (!has("seed")) throw Error(ErrorCode::InvalidArgument, "--seed is required for this command");
    return u64("seed");
  }

  fs::path out_dir() const {
    if (!has("out")) throw Error(ErrorCode::InvalidArgument, "--out is required for this command");
    fs::path dir = str("out");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::IoError, "cannot create output directory " + dir.string());
    return dir;
  }

 private:
  const json &at(const std::string &key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error(ErrorCode::InvalidArgument, "missing value for " + key);
    return *it;
  }

  json values_ = json::object();
};

/// Seeds derived from the root; everything a run draws traces back to these.
struct Seeds {
  std::uint64_t root = 0;
  std::uint64_t model = 0;
  std::uint64_t mask = 0;
  std::vector<std::uint64_t> eval;

  explicit Seeds(const RunConfig &cfg) : root(cfg.seed()) {
    model = derive_seed(root, kModelStream);
    mask = derive_seed(root, kMaskStream);
    eval = cfg.has("seeds") ? cfg.u64s("seeds") : std::vector<std::uint64_t>{derive_seed(root, kEvalStream)};
    if (eval.empty()) throw Error(ErrorCode::InvalidArgument, "--seeds must list at least one seed");
  }

  json to_json() const { return {{"root", root}, {"model", model}, {"mask", mask}, {"eval", eval}}; }
};

struct Input {
  std::shared_ptr<const PointCloud> cloud;
  VoxelGridConfig voxel;
  std::string source;
};

VoxelGridConfig voxel_config(const RunConfig &cfg, VoxelGridConfig base) {
  if (cfg.has("voxel_size")) base.voxel_size = cfg.vec3("voxel_size");
  if (cfg.has("range_min")) base.range_min = cfg.vec3("range_min");
  if (cfg.has("range_max")) base.range_max = cfg.vec3("range_max");
  base.max_points_per_voxel = cfg.u64("max_points_per_voxel");
  base.validate();
  return base;
}

std::vector<Input> load_inputs(const RunConfig &cfg, std::vector<std::string> &input_files) {
  std::vector<Input> inputs;
  const auto specs = cfg.strs("scene_spec");
  if (!specs.empty() && cfg.has("scan")) {
    throw Error(ErrorCode::InvalidArgument, "give either --scene-spec or --scan, not both");
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const json j = read_json_file(specs[i]);
    input_files.push_back(specs[i]);
    SceneSpec spec = SceneSpec::from_json(j);
    if (!j.contains("seed")) spec.seed = derive_seed(derive_seed(cfg.seed(), kSceneStream), i);
    Input in;
    in.cloud = std::make_shared<const PointCloud>(generate_scene(spec));
    in.voxel = voxel_config(cfg, VoxelGridConfig::unit(spec.extent));
    in.source = specs[i];
    inputs.push_back(std::move(in));
  }
  if (cfg.has("scan")) {
    const std::string scan = cfg.str("scan");
    PointCloud cloud = read_scan(scan, scan_layout_from_name(cfg.str("layout")));
    input_files.push_back(scan);
    if (cfg.has("labels")) {
      const std::string labels = cfg.str("labels");
      cloud.labels = read_labels(labels, cloud.size());
      cloud.label_space = LabelSpace::Raw;
      input_files.push_back(labels);
      ClassMap map = ClassMap::nuscenes_default();
      if (cfg.has("class_map")) {
        map = ClassMap::load(cfg.str("class_map"));
        input_files.push_back(cfg.str("class_map"));
      }
      cloud = map_labels(cloud, map);
    }
    Input in;
    in.cloud = std::make_shared<const PointCloud>(std::move(cloud));
    in.voxel = voxel_config(cfg, VoxelGridConfig{});
    in.source = scan;
    inputs.push_back(std::move(in));
  }
  if (inputs.empty()) throw Error(ErrorCode::InvalidArgument, "no input: give --scene-spec or --scan");
  return inputs;
}

std::optional<ImportancePolicy> load_policy_file(const RunConfig &cfg, std::vector<std::string> &input_files) {
  if (!cfg.has("policy_file")) return std::nullopt;
  input_files.push_back(cfg.str("policy_file"));
  return ImportancePolicy::from_json(read_json_file(cfg.str("policy_file")));
}

LevelMap levels_for(const std::optional<ImportancePolicy> &pf) { return pf ? pf->levels : default_levels(); }

GroupWeights weights_for(const RunConfig &cfg, const std::optional<ImportancePolicy> &pf) {
  if (cfg.has("weights")) return parse_group_weights(cfg.str("weights"));
  if (pf) return std::get<ImportanceMasking>(pf->policy.kind).weights;
  return default_group_weights();
}

MaskPolicy make_policy(const std::string &kind, const RunConfig &cfg, const std::optional<ImportancePolicy> &pf,
                       std::uint64_t seed) {
  MaskPolicy p;
  p.rho = cfg.f64("rho");
  p.seed = seed;
  p.strict_budget = cfg.flag("strict_budget");
  if (kind == "uniform") {
    p.kind = UniformMasking{};
  } else if (kind == "class-target") {
    if (!cfg.has("class")) throw Error(ErrorCode::InvalidArgument, "class-target masking needs --class");
    const auto tau = cfg.u64("tau");
    if (tau < 1 || tau > 0xFFFFFFFFULL) throw Error(ErrorCode::InvalidArgument, "--tau must be at least 1");
    p.kind = ClassTargetMasking{class_from_name(cfg.str("class")), static_cast<std::uint32_t>(tau)};
  } else if (kind == "importance") {
    p.kind = ImportanceMasking{weights_for(cfg, pf)};
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown policy '" + kind + "'");
  }
  p.validate();
  return p;
}

VoxelGrid grid_for(const Input &in, const LevelMap &levels) {
  VoxelGrid grid = voxelize(in.cloud, in.voxel);
  if (in.cloud->labeled() && in.cloud->label_space == LabelSpace::Detection) {
    grid = assign_groups(grid, levels, default_priority());
  }
  return grid;
}

std::vector<ToyScene> scenes_for(const std::vector<Input> &inputs, const LevelMap &levels, const RunConfig &cfg,
                                 const ToyModelConfig &mc) {
  std::vector<ToyScene> scenes;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].cloud->labeled()) throw Error(ErrorCode::UnlabeledGrid, inputs[i].source + " has no labels");
    scenes.push_back(prepare_scene(inputs[i].cloud, inputs[i].voxel, levels,
                                   derive_seed(derive_seed(cfg.seed(), kImageStream), i), mc.image_patches,
                                   mc.patch_pixels));
  }
  return scenes;
}

ToyModelConfig model_config(const RunConfig &cfg, std::uint64_t model_seed) {
  ToyModelConfig mc;
  mc.seed = model_seed;
  mc.steps = cfg.u64("steps");
  mc.learning_rate = cfg.f64("learning_rate");
  mc.points_per_voxel_out = cfg.u64("points_per_voxel_out");
  mc.encoder_hidden = cfg.u64("encoder_hidden");
  const auto src = cfg.str("label_source");
  if (src != "mapped" && src != "raw") throw Error(ErrorCode::InvalidArgument, "--label-source must be mapped or raw");
  mc.label_source = src == "mapped" ? LabelSource::Mapped : LabelSource::Raw;
  const auto var = cfg.str("chamfer_variant");
  if (var != "euclidean" && var != "squared") {
    throw Error(ErrorCode::InvalidArgument, "--chamfer-variant must be euclidean or squared");
  }
  mc.chamfer_variant = var == "euclidean" ? ChamferVariant::Euclidean : ChamferVariant::Squared;
  mc.validate();
  return mc;
}

SemanticBranch branch_for(const RunConfig &cfg) {
  const auto s = cfg.str("semantic");
  if (s == "on") return SemanticBranch::On;
  if (s == "off") return SemanticBranch::Off;
  throw Error(ErrorCode::InvalidArgument, "--semantic must be on or off");
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void write_json(const fs::path &path, const json &j) { write_text(path, j.dump(2) + "\n"); }

class Manifest {
 public:
  Manifest(std::string command, const RunConfig &cfg) : command_(std::move(command)), config_(cfg.values()) {}

  void input(const std::string &path) { inputs_.push_back(path); }
  void output(const std::string &name) { outputs_.push_back(name); }
  void set(const std::string &key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path &dir) const {
    json in = json::array();
    for (const auto &p : inputs_) in.push_back({{"path", p}, {"fnv1a64", fnv1a_hex(read_file_bytes(p))}});
    json j = {{"tool", "semmask"},
              {"version", kVersion},
              {"command", command_},
              {"config", config_},
              {"config_hash", fnv1a_hex(config_.dump())},
              {"inputs", in},
              {"outputs", outputs_}};
    for (const auto &[k, v] : extra_.items()) j[k] = v;
    write_json(dir / "run_manifest.json", j);
  }

 private:
  std::string command_;
  json config_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
  json extra_ = json::object();
};

// ---------------------------------------------------------------------------

int cmd_voxelize(const RunConfig &cfg, std::ostream &out) {
  std::vector<std::string> files;
  const auto pf = load_policy_file(cfg, files);
  const auto inputs = load_inputs(cfg, files);
  if (inputs.size() != 1) throw Error(ErrorCode::InvalidArgument, "voxelize takes exactly one input");
  const VoxelGrid grid = grid_for(inputs.front(), levels_for(pf));
  const fs::path dir = cfg.out_dir();

  std::ostringstream jsonl;
  export_grid_jsonl(grid, jsonl);
  write_text(dir / "grid.jsonl", jsonl.str());

  json hist = json::object();
  for (const auto &[n, count] : occupancy_histogram(grid)) hist[std::to_string(n)] = count;
  json stats = {{"num_voxels", grid.size()},
                {"points_in", grid.stats().points_in},
                {"dropped_out_of_range", grid.stats().dropped_out_of_range},
                {"dropped_over_cap", grid.stats().dropped_over_cap},
                {"occupancy_histogram", hist},
                {"voxel_config", grid.config().to_json()}};
  if (!grid.voxels().empty() && grid.voxels().front().group) {
    json groups = json::object();
    for (auto g : kAllGroups) groups[std::string(group_name(g))] = 0;
    for (const auto &v : grid.voxels()) groups[std::string(group_name(*v.group))] = groups[std::string(group_name(*v.group))].get<std::size_t>() + 1;
    stats["groups"] = groups;
  }
  write_json(dir / "voxel_stats.json", stats);

  Manifest m("voxelize", cfg);
  for (const auto &f : files) m.input(f);
  m.output("grid.jsonl");
  m.output("voxel_stats.json");
  m.write(dir);
  out << "voxels " << grid.size() << " from " << grid.stats().points_in << " points ("
      << grid.stats().dropped_out_of_range << " out of range)\n";
  return 0;
}

int cmd_mask(const RunConfig &cfg, std::ostream &out) {
  const Seeds seeds(cfg);
  std::vector<std::string> files;
  const auto pf = load_policy_file(cfg, files);
  const auto inputs = load_inputs(cfg, files);
  if (inputs.size() != 1) throw Error(ErrorCode::InvalidArgument, "mask takes exactly one input");
  const VoxelGrid grid = grid_for(inputs.front(), levels_for(pf));
  const MaskPolicy policy = make_policy(cfg.str("policy"), cfg, pf, seeds.mask);
  const MaskAssignment a = generate_mask(grid, policy);
  const fs::path dir = cfg.out_dir();
  write_json(dir / "mask_assignment.json", a.to_json());

  Manifest m("mask", cfg);
  for (const auto &f : files) m.input(f);
  m.set("seeds", seeds.to_json());
  m.output("mask_assignment.json");
  m.write(dir);
  out << policy.kind_name() << ": masked " << a.masked.size() << " of " << a.num_voxels << " voxels\n";
  for (const auto &w : a.warnings) out << "warning: " << w << '\n';
  return 0;
}

void print_report(const ImportanceReport &report, std::ostream &out) {
  out << std::left << std::setw(22) << "class" << std::right << std::setw(12) << "CD(gt->pr)" << std::setw(12)
      << "CD(pr->gt)" << std::setw(11) << "mean rank" << std::setw(9) << "level" << std::setw(8) << "weight" << '\n';
  out << std::fixed;
  for (const auto &r : report.rows) {
    out << std::left << std::setw(22) << class_name(r.class_id) << std::right << std::setprecision(4) << std::setw(12)
        << r.metrics.chamfer_gt_to_pred << std::setw(12) << r.metrics.chamfer_pred_to_gt << std::setprecision(1)
        << std::setw(11) << r.mean_rank << std::setw(9) << level_name(r.level) << std::setprecision(2)
        << std::setw(8) << r.weight << '\n';
  }
  out << std::left << std::setw(22) << "background" << std::right << std::setw(12) << "-" << std::setw(12) << "-"
      << std::setw(11) << "-" << std::setw(9) << "-" << std::setprecision(2) << std::setw(8)
      << report.background_weight << '\n';
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

RankingConfig ranking_config(const RunConfig &cfg, const std::optional<ImportancePolicy> &pf) {
  RankingConfig rc;
  rc.include_occupancy = cfg.flag("include_occupancy");
  rc.high_threshold = cfg.f64("high_threshold");
  rc.medium_threshold = cfg.f64("medium_threshold");
  rc.weights = weights_for(cfg, pf);
  return rc;
}

int cmd_analyze(const RunConfig &cfg, std::ostream &out, std::ostream &err) {
  const Seeds seeds(cfg);
  std::vector<std::string> files;
  const auto pf = load_policy_file(cfg, files);
  const RankingConfig ranking = ranking_config(cfg, pf);
  Manifest m("analyze-importance", cfg);
  m.set("seeds", seeds.to_json());

  ImportanceReport report;
  std::vector<LossBreakdown> log;
  json mask_stats;
  bool partial = false;
  if (cfg.has("metrics_csv")) {
    const std::string path = cfg.str("metrics_csv");
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path);
    files.push_back(path);
    std::ifstream in(path);
    report = rank_importance(read_metrics_csv(in), ranking);
    mask_stats = {{"source", "metrics_csv"}, {"metrics_csv", path}, {"cells", json::array()}};
  } else {
    const auto inputs = load_inputs(cfg, files);
    const ToyModelConfig mc = model_config(cfg, seeds.model);
    const auto scenes = scenes_for(inputs, levels_for(pf), cfg, mc);
    AnalysisConfig ac;
    const auto tau = cfg.u64("tau");
    if (tau < 1 || tau > 0xFFFFFFFFULL) throw Error(ErrorCode::InvalidArgument, "--tau must be at least 1");
    ac.tau = static_cast<std::uint32_t>(tau);
    ac.rho = cfg.f64("rho");
    ac.seeds = seeds.eval;
    for (const auto &name : cfg.strs("classes")) ac.classes.push_back(class_from_name(name));
    ac.strict_budget = cfg.flag("strict_budget");
    ac.ranking = ranking;
    ac.eval.variant = mc.chamfer_variant;
    const auto agg = cfg.str("aggregation");
    if (agg != "per_voxel" && agg != "global") throw Error(ErrorCode::InvalidArgument, "--aggregation must be per_voxel or global");
    ac.eval.aggregation = agg == "per_voxel" ? ChamferAggregation::PerVoxel : ChamferAggregation::Global;
    const double lambda = cfg.f64("lambda_sem");

    AnalysisRun run;
    if (cfg.flag("retrain_per_class")) {
      run = run_class_importance_analysis_retrained(mc, scenes, ac, seeds.mask, lambda);
    } else {
      MaskPolicy train_policy;
      train_policy.rho = ac.rho;
      train_policy.seed = seeds.mask;
      auto trained = train_toy(mc, scenes, train_policy, lambda, branch_for(cfg));
      log = std::move(trained.log);
      run = run_class_importance_analysis(trained.model, scenes, ac);
    }
    report = run.report;
    partial = run.partial;
    mask_stats = run.mask_stats_json();
    mask_stats["source"] = "toy_model";
    m.set("model_config", mc.to_json());
    m.set("training", cfg.flag("retrain_per_class") ? "retrain_per_class" : "frozen_after_uniform");
  }

  const ImportancePolicy policy =
      build_policy_from_report(report, ranking.weights, cfg.f64("rho"), seeds.mask, Level::Low);

  const fs::path dir = cfg.out_dir();
  std::ostringstream csv;
  report.write_csv(csv);
  write_text(dir / "importance_report.csv", csv.str());
  write_json(dir / "importance_report.json", report.to_json());
  write_json(dir / "policy.json", policy.to_json());
  std::ostringstream loss_csv;
  write_loss_log_csv(log, loss_csv);
  write_text(dir / "loss_log.csv", loss_csv.str());
  write_json(dir / "mask_stats.json", mask_stats);
  for (const auto &f : files) m.input(f);
  for (const char *name :
       {"importance_report.csv", "importance_report.json", "policy.json", "loss_log.csv", "mask_stats.json"}) {
    m.output(name);
  }
  m.set("partial", partial);
  m.write(dir);

  print_report(report, out);
  if (partial) {
    err << "analysis is partial: some cells failed or produced no Chamfer value (see mask_stats.json)\n";
    return 1;
  }
  return 0;
}

int cmd_train(const RunConfig &cfg, std::ostream &out) {
  const Seeds seeds(cfg);
  std::vector<std::string> files;
  const auto pf = load_policy_file(cfg, files);
  const auto inputs = load_inputs(cfg, files);
  const ToyModelConfig mc = model_config(cfg, seeds.model);
  const auto scenes = scenes_for(inputs, levels_for(pf), cfg, mc);
  const MaskPolicy policy = make_policy(cfg.str("policy"), cfg, pf, seeds.mask);
  const double lambda = cfg.f64("lambda_sem");
  const auto trained = train_toy(mc, scenes, policy, lambda, branch_for(cfg));

  const fs::path dir = cfg.out_dir();
  std::ostringstream loss_csv;
  write_loss_log_csv(trained.log, loss_csv);
  write_text(dir / "loss_log.csv", loss_csv.str());
  save_head(trained.model.semantic_head(), dir / "semantic_head.ckpt");

  Manifest m("train-toy", cfg);
  for (const auto &f : files) m.input(f);
  m.set("seeds", seeds.to_json());
  m.set("model_config", mc.to_json());
  m.set("policy", policy.to_json());
  m.output("loss_log.csv");
  m.output("semantic_head.ckpt");
  m.write(dir);

  const auto &first = trained.log.front();
  const auto &last = trained.log.back();
  out << std::setprecision(6) << "l_total " << first.l_total << " -> " << last.l_total << " over " << mc.steps
      << " steps (l_img " << last.l_img << ", l_c " << last.l_c << ", l_occ " << last.l_occ << ", l_sem "
      << last.l_sem << ")\n";
  return 0;
}

std::string lambda_label(double lambda) {
  std::ostringstream ss;
  ss << lambda;
  return ss.str();
}

int cmd_compare(const RunConfig &cfg, std::ostream &out) {
  const Seeds seeds(cfg);
  std::vector<std::string> files;
  const auto pf = load_policy_file(cfg, files);
  const auto inputs = load_inputs(cfg, files);
  const ToyModelConfig mc = model_config(cfg, seeds.model);
  const auto scenes = scenes_for(inputs, levels_for(pf), cfg, mc);

  std::vector<PolicyVariant> variants;
  const auto lambdas = cfg.f64s("lambdas");
  if (lambdas.empty()) throw Error(ErrorCode::InvalidArgument, "--lambdas must list at least one value");
  for (const auto &kind : cfg.strs("policies")) {
    const MaskPolicy p = make_policy(kind, cfg, pf, seeds.mask);
    for (double lambda : lambdas) {
      if (lambda == 0.0) variants.push_back({kind + "@baseline", p, 0.0, SemanticBranch::Off});
      variants.push_back({kind + "@" + lambda_label(lambda), p, lambda, SemanticBranch::On});
    }
  }
  const ComparisonReport report = compare_policies(mc, scenes, variants, seeds.eval);

  // lambda = 0 against the semantic-off baseline of the same policy.
  json baseline_checks = json::array();
  for (std::size_t i = 0; i + 1 < report.outcomes.size(); ++i) {
    const auto &b = report.outcomes[i];
    const auto &z = report.outcomes[i + 1];
    if (variants[i].branch != SemanticBranch::Off) continue;
    bool same = b.log.size() == z.log.size();
    for (std::size_t t = 0; same && t < b.log.size(); ++t) {
      same = b.log[t].l_img == z.log[t].l_img && b.log[t].l_c == z.log[t].l_c && b.log[t].l_occ == z.log[t].l_occ &&
             b.log[t].l_total == z.log[t].l_total;
    }
    baseline_checks.push_back({{"baseline", b.name}, {"variant", z.name}, {"bit_identical", same}});
  }

  const fs::path dir = cfg.out_dir();
  std::ostringstream csv;
  report.write_csv(csv);
  write_text(dir / "comparison.csv", csv.str());
  json j = report.to_json();
  j["lambda0_baseline_checks"] = baseline_checks;
  write_json(dir / "comparison.json", j);
  Manifest m("compare", cfg);
  for (const auto &f : files) m.input(f);
  m.set("seeds", seeds.to_json());
  m.set("model_config", mc.to_json());
  m.output("comparison.csv");
  m.output("comparison.json");
  for (const auto &o : report.outcomes) {
    std::string file = "loss_log_" + o.name + ".csv";
    std::replace(file.begin(), file.end(), '@', '_');
    std::ostringstream loss_csv;
    write_loss_log_csv(o.log, loss_csv);
    write_text(dir / file, loss_csv.str());
    m.output(file);
  }
  m.write(dir);

  out << csv.str();
  out << "budgets equal across policies: " << (report.budgets_equal ? "yes" : "no") << '\n';
  for (const auto &c : baseline_checks) {
    out << c["variant"].get<std::string>() << " vs " << c["baseline"].get<std::string>() << ": "
        << (c["bit_identical"].get<bool>() ? "bit-identical" : "DIFFERENT") << '\n';
  }
  return 0;
}

int cmd_report(const RunConfig &cfg, std::ostream &out) {
  if (!cfg.has("report_csv")) throw Error(ErrorCode::InvalidArgument, "report needs an importance_report.csv");
  const std::string path = cfg.str("report_csv");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path);
  std::ifstream in(path);
  const ImportanceReport report = ImportanceReport::read_csv(in);
  print_report(report, out);
  if (cfg.has("out")) {
    const fs::path dir = cfg.out_dir();
    write_json(dir / "report.json", report.to_json());
    Manifest m("report", cfg);
    m.input(path);
    m.output("report.json");
    m.write(dir);
  }
  return 0;
}

struct Command {
  const char *name;
  const char *help;
  unsigned sections;
};

const std::vector<Command> &commands() {
  static const std::vector<Command> list = {
      {"voxelize", "voxelize one input and export the grid", kGlobal | kInput},
      {"mask", "generate a mask assignment under a policy", kGlobal | kInput | kPolicy},
      {"analyze-importance", "rank classes by masked reconstruction degradation",
       kGlobal | kInput | kPolicy | kModel | kAnalysis},
      {"train-toy", "train the toy masked autoencoder", kGlobal | kInput | kPolicy | kModel},
      {"compare", "train under several policies and compare", kGlobal | kInput | kPolicy | kModel | kAnalysis | kCompare},
      {"report", "print an importance report", kGlobal | kReport},
  };
  return list;
}

}  // namespace

std::string fnv1a_hex(const std::string &bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::map<std::string, std::string> semmask_environment() {
  std::map<std::string, std::string> env;
  for (char **e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry(*e);
    if (entry.rfind("SEMMASK_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    env[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return env;
}

int run(const std::vector<std::string> &args, const std::map<std::string, std::string> &env, std::ostream &out,
        std::ostream &err) {
  CLI::App app{"Semantic-aware voxel masking toolkit", "semmask"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::optional<std::string> config_path;
  app.add_option("--config", config_path, "JSON config file (or a previous run_manifest.json)");

  // Raw flag text per key, converted after parsing.
  std::map<std::string, std::vector<std::string>> texts;
  std::map<std::string, bool> bools;
  std::map<std::string, std::map<std::string, CLI::Option *>> options;  // scope -> key -> option
  auto add_key = [&](CLI::App &target, const std::string &scope, const KeySpec &k) {
    CLI::Option *opt = nullptr;
    switch (k.kind) {
      case Kind::Flag: opt = target.add_flag(k.flag, bools[k.key], k.help); break;
      case Kind::StrList:
      case Kind::U64List:
      case Kind::F64List: opt = target.add_option(k.flag, texts[k.key], k.help)->delimiter(','); break;
      default: opt = target.add_option(k.flag, texts[k.key], k.help)->expected(1); break;
    }
    options[scope][k.key] = opt;
  };
  for (const auto &k : key_table()) {
    if (k.sections & kGlobal) add_key(app, "", k);
  }

  std::map<std::string, CLI::App *> subs;
  for (const auto &c : commands()) {
    CLI::App *sub = app.add_subcommand(c.name, c.help);
    sub->fallthrough();
    for (const auto &k : key_table()) {
      if ((k.sections & c.sections & ~kGlobal) != 0) add_key(*sub, c.name, k);
    }
    if (std::string(c.name) == "report") {
      sub->add_option("report_csv", texts["report_positional"], "importance_report.csv")->expected(0, 1);
    }
    subs[c.name] = sub;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const Command *cmd = nullptr;
    for (const auto &c : commands()) {
      if (subs[c.name]->parsed()) cmd = &c;
    }
    std::map<std::string, json> flags;
    for (const auto &k : key_table()) {
      if ((k.sections & cmd->sections) == 0) continue;
      const auto &scope = options[(k.sections & kGlobal) ? "" : cmd->name];
      auto it = scope.find(k.key);
      if (it == scope.end() || it->second->count() == 0) continue;
      if (k.kind == Kind::Flag) {
        flags[k.key] = bools[k.key];
      } else if (k.kind == Kind::StrList || k.kind == Kind::U64List || k.kind == Kind::F64List) {
        std::string joined;
        for (const auto &t : texts[k.key]) joined += (joined.empty() ? "" : ",") + t;
        flags[k.key] = from_text(k, joined, k.flag);
      } else {
        flags[k.key] = from_text(k, texts[k.key].back(), k.flag);
      }
    }
    if (!texts["report_positional"].empty()) flags["report_csv"] = texts["report_positional"].back();

    const RunConfig cfg(cmd->sections, config_path, env, flags);
    if (cfg.flag("dry_run")) {
      out << json{{"command", cmd->name}, {"config", cfg.values()}}.dump(2) << '\n';
      return 0;
    }
    const std::string name = cmd->name;
    if (name == "voxelize") return cmd_voxelize(cfg, out);
    if (name == "mask") return cmd_mask(cfg, out);
    if (name == "analyze-importance") return cmd_analyze(cfg, out, err);
    if (name == "train-toy") return cmd_train(cfg, out);
    if (name == "compare") return cmd_compare(cfg, out);
    return cmd_report(cfg, out);
  } catch (const Error &e) {
    err << "error: " << e.what() << '\n';
    return is_usage_error(e.code()) ? 2 : 1;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace semmask::cli
