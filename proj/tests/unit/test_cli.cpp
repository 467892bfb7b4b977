#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kSource = SEMMASK_SOURCE_DIR;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result invoke(const std::vector<std::string> &args, const std::map<std::string, std::string> &env = {}) {
  std::ostringstream out, err;
  Result r;
  r.code = semmask::cli::run(args, env, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string &name) {
  const fs::path dir = fs::temp_directory_path() / "semmask_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json read_json(const fs::path &p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string tiny_spec(const fs::path &dir) {
  const json spec = {{"seed", 4},
                     {"extent", {8, 8, 3}},
                     {"ground_density", 2},
                     {"objects",
                      {{{"class", "car"}, {"count", 1}, {"points_per_object", 60}, {"size", {2, 1, 1}},
                        {"bounds_min", {2, 2, 0.8}}, {"bounds_max", {6, 6, 1.2}}},
                       {{"class", "pedestrian"}, {"count", 2}, {"points_per_object", 10}, {"size", {1, 1, 1.5}},
                        {"bounds_min", {1, 1, 0.8}}, {"bounds_max", {7, 7, 1.2}}}}}};
  const auto path = dir / "tiny.json";
  std::ofstream(path) << spec.dump();
  return path.string();
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"no-such-command"}).code == 2);
  CHECK(invoke({"mask", "--bogus"}).code == 2);
  const auto dir = scratch("usage");
  const auto r = invoke({"mask", "--scene-spec", kSource + "/data/scenes/street_a.json", "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("--seed") != std::string::npos);
  CHECK(invoke({"mask", "--seed", "x1", "--dry-run"}).code == 2);
  CHECK(invoke({"voxelize", "--scan", (dir / "absent.bin").string(), "--out", dir.string()}).code == 2);
}

TEST_CASE("dry run merges defaults, config file, environment and flags in that order") {
  const auto dir = scratch("dry");
  const auto cfg_path = dir / "cfg.json";
  std::ofstream(cfg_path) << json{{"rho", 0.5}, {"tau", 3}, {"steps", 9}}.dump();

  auto r = invoke({"mask", "--seed", "1", "--dry-run"});
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["command"] == "mask");
  CHECK(j["config"]["rho"] == 0.7);
  CHECK(j["config"]["policy"] == "uniform");
  CHECK_FALSE(j["config"].contains("steps"));  // not a mask key

  r = invoke({"--config", cfg_path.string(), "mask", "--seed", "1", "--dry-run"});
  j = json::parse(r.out);
  CHECK(j["config"]["rho"] == 0.5);
  CHECK(j["config"]["tau"] == 3);

  r = invoke({"--config", cfg_path.string(), "mask", "--seed", "1", "--dry-run"}, {{"SEMMASK_RHO", "0.6"}});
  CHECK(json::parse(r.out)["config"]["rho"] == 0.6);

  r = invoke({"--config", cfg_path.string(), "mask", "--seed", "1", "--rho", "0.4", "--dry-run"},
             {{"SEMMASK_RHO", "0.6"}});
  CHECK(json::parse(r.out)["config"]["rho"] == 0.4);

  r = invoke({"mask", "--dry-run"}, {{"SEMMASK_SEED", "17"}});
  CHECK(json::parse(r.out)["config"]["seed"] == 17);

  std::ofstream(dir / "bad.json") << json{{"not_a_key", 1}}.dump();
  CHECK(invoke({"--config", (dir / "bad.json").string(), "mask", "--seed", "1", "--dry-run"}).code == 2);
  CHECK(invoke({"mask", "--seed", "1", "--dry-run"}, {{"SEMMASK_RHO", "lots"}}).code == 2);
}

TEST_CASE("ranking precomputed metrics") {
  const auto dir = scratch("reference");
  const auto r = invoke({"analyze-importance", "--seed", "1", "--metrics-csv", kSource + "/data/reference_class_metrics.csv",
                         "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("car") != std::string::npos);
  for (const char *name : {"importance_report.csv", "importance_report.json", "policy.json", "loss_log.csv",
                           "mask_stats.json", "run_manifest.json"}) {
    CHECK(fs::exists(dir / name));
  }
  const auto policy = read_json(dir / "policy.json");
  CHECK(policy["levels"]["car"] == "High");
  CHECK(policy["levels"]["trailer"] == "Low");
  CHECK(policy["class_weights"]["bus"] == 0.95);

  const auto manifest = read_json(dir / "run_manifest.json");
  CHECK(manifest["command"] == "analyze-importance");
  CHECK(manifest["inputs"].size() == 1);
  CHECK(manifest["inputs"][0]["fnv1a64"].get<std::string>().size() == 16);
  CHECK(manifest["config_hash"] == semmask::cli::fnv1a_hex(manifest["config"].dump()));

  // The manifest replays as a config.
  const auto dir2 = scratch("reference_replay");
  const auto again = invoke({"--config", (dir / "run_manifest.json").string(), "analyze-importance", "--out",
                             dir2.string()});
  CHECK(again.code == 0);
  CHECK(again.out == r.out);

  const auto shown = invoke({"report", (dir / "importance_report.csv").string()});
  CHECK(shown.code == 0);
  CHECK(shown.out == r.out);
}

TEST_CASE("voxelize and mask write their outputs") {
  const auto dir = scratch("vm");
  const auto spec = tiny_spec(dir);
  auto r = invoke({"voxelize", "--scene-spec", spec, "--out", (dir / "vox").string()});
  REQUIRE(r.code == 0);
  const auto stats = read_json(dir / "vox" / "voxel_stats.json");
  CHECK(stats["num_voxels"].get<std::size_t>() > 0);
  CHECK(stats["groups"].contains("Background"));

  r = invoke({"mask", "--seed", "3", "--scene-spec", spec, "--policy", "class-target", "--class", "car", "--out",
              (dir / "m").string()});
  REQUIRE(r.code == 0);
  const auto a = read_json(dir / "m" / "mask_assignment.json");
  CHECK(a["policy"]["kind"] == "class-target");
  CHECK(a["target_count"].get<std::size_t>() > 0);
  const auto m = read_json(dir / "m" / "run_manifest.json");
  CHECK(m["seeds"]["root"] == 3);

  // Same seed, same assignment.
  r = invoke({"mask", "--seed", "3", "--scene-spec", spec, "--policy", "class-target", "--class", "car", "--out",
              (dir / "m2").string()});
  CHECK(read_json(dir / "m2" / "mask_assignment.json") == a);

  CHECK(invoke({"mask", "--seed", "3", "--scene-spec", spec, "--policy", "class-target", "--out",
                (dir / "m3").string()})
            .code == 2);
  CHECK(invoke({"mask", "--seed", "3", "--scene-spec", spec, "--policy", "class-target", "--class", "car", "--rho",
                "0.01", "--strict-budget", "--out", (dir / "m4").string()})
            .code == 1);
}

TEST_CASE("train and compare on a tiny scene") {
  const auto dir = scratch("train");
  const auto spec = tiny_spec(dir);
  auto r = invoke({"train-toy", "--seed", "2", "--scene-spec", spec, "--steps", "3", "--out", (dir / "t").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "t" / "semantic_head.ckpt"));
  std::ifstream log(dir / "t" / "loss_log.csv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 5);

  r = invoke({"compare", "--seed", "2", "--scene-spec", spec, "--steps", "3", "--lambdas", "0,0.25", "--seeds", "1,2",
              "--out", (dir / "c").string()});
  REQUIRE(r.code == 0);
  const auto c = read_json(dir / "c" / "comparison.json");
  CHECK(c["outcomes"].size() == 6);
  REQUIRE(c["lambda0_baseline_checks"].size() == 2);
  for (const auto &check : c["lambda0_baseline_checks"]) CHECK(check["bit_identical"] == true);
  CHECK(r.out.find("budgets equal across policies: yes") != std::string::npos);
}
