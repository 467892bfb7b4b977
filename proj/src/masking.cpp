#include "semmask/masking.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "semmask/rng.hpp"

namespace semmask {

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t");
  auto e = s.find_last_not_of(" \t");
  return b == std::string_view::npos ? std::string{} : std::string(s.substr(b, e - b + 1));
}

void check_rho(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "rho must lie in [0, 1]");
}

// Fills the common fields once `masked` holds positions into grid.voxels().
MaskAssignment finish(const VoxelGrid &grid, std::vector<std::size_t> masked_pos, MaskPolicy policy,
                      std::size_t budget) {
  std::sort(masked_pos.begin(), masked_pos.end());
  MaskAssignment out;
  out.policy = std::move(policy);
  out.num_voxels = grid.size();
  out.budget = budget;
  out.grid_fingerprint = grid.fingerprint();
  std::vector<bool> is_masked(grid.size(), false);
  for (auto p : masked_pos) is_masked[p] = true;
  out.masked.reserve(masked_pos.size());
  out.visible.reserve(grid.size() - masked_pos.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Voxel &v = grid.voxels()[i];
    (is_masked[i] ? out.masked : out.visible).push_back(v.index);
    if (v.group) {
      auto &tally = out.per_group_masked[static_cast<std::size_t>(*v.group)];
      ++tally.total;
      if (is_masked[i]) ++tally.masked;
    }
  }
  out.realized_ratio = grid.empty() ? 0.0 : static_cast<double>(out.masked.size()) / static_cast<double>(grid.size());
  return out;
}

}  // namespace

GroupWeights default_group_weights() { return {0.75, 0.95, 1.05, 1.20}; }

GroupWeights parse_group_weights(std::string_view text) {
  GroupWeights w{};
  std::array<bool, kNumGroups> seen{};
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::ParseError, "weight entry '" + item + "' lacks '='");
    const auto g = static_cast<std::size_t>(group_from_name(trim(std::string_view(item).substr(0, eq))));
    const std::string value = trim(std::string_view(item).substr(eq + 1));
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (used == 0 || used != value.size()) throw Error(ErrorCode::ParseError, "bad weight '" + value + "'");
    w[g] = v;
    seen[g] = true;
  }
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (!seen[g]) {
      throw Error(ErrorCode::ParseError, "missing weight for group " + std::string(group_name(kAllGroups[g])));
    }
  }
  return w;
}

std::string format_group_weights(const GroupWeights &w) {
  std::ostringstream os;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    std::string name(group_name(kAllGroups[g]));
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    os << (g ? "," : "") << name << '=' << w[g];
  }
  return os.str();
}

void MaskPolicy::validate() const {
  check_rho(rho);
  if (const auto *ct = std::get_if<ClassTargetMasking>(&kind)) {
    if (ct->tau < 1) throw Error(ErrorCode::InvalidArgument, "tau must be at least 1");
    if (ct->target >= kNumMappedLabels) throw Error(ErrorCode::InvalidArgument, "target class out of range");
  }
  if (const auto *iw = std::get_if<ImportanceMasking>(&kind)) {
    for (double w : iw->weights) {
      if (!(w > 0.0) || !std::isfinite(w)) throw Error(ErrorCode::InvalidArgument, "group weights must be positive");
    }
  }
}

std::string MaskPolicy::kind_name() const {
  return std::visit(
      [](const auto &k) -> std::string {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, UniformMasking>) return "uniform";
        else if constexpr (std::is_same_v<T, ClassTargetMasking>) return "class-target";
        else return "importance";
      },
      kind);
}

nlohmann::json MaskPolicy::to_json() const {
  nlohmann::json j = {{"kind", kind_name()}, {"rho", rho}, {"seed", seed}};
  if (const auto *ct = std::get_if<ClassTargetMasking>(&kind)) {
    j["class"] = std::string(class_name(ct->target));
    j["tau"] = ct->tau;
    j["strict_budget"] = strict_budget;
  }
  if (const auto *iw = std::get_if<ImportanceMasking>(&kind)) {
    nlohmann::json w = nlohmann::json::object();
    for (std::size_t g = 0; g < kNumGroups; ++g) w[std::string(group_name(kAllGroups[g]))] = iw->weights[g];
    j["weights"] = w;
  }
  return j;
}

MaskPolicy MaskPolicy::from_json(const nlohmann::json &j) {
  MaskPolicy p;
  try {
    const auto kind = j.at("kind").get<std::string>();
    p.rho = j.value("rho", 0.7);
    p.seed = j.value("seed", std::uint64_t{0});
    if (kind == "uniform") {
      p.kind = UniformMasking{};
    } else if (kind == "class-target") {
      p.kind = ClassTargetMasking{class_from_name(j.at("class").get<std::string>()), j.value("tau", 1U)};
      p.strict_budget = j.value("strict_budget", false);
    } else if (kind == "importance") {
      ImportanceMasking im;
      if (j.contains("weights")) {
        for (const auto &[name, value] : j["weights"].items()) {
          im.weights[static_cast<std::size_t>(group_from_name(name))] = value.get<double>();
        }
      }
      p.kind = im;
    } else {
      throw Error(ErrorCode::ParseError, "unknown policy kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, std::string("policy: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json MaskAssignment::to_json() const {
  nlohmann::json masked_list = nlohmann::json::array();
  for (const auto &v : masked) masked_list.push_back({v.x, v.y, v.z});
  nlohmann::json groups = nlohmann::json::object();
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    groups[std::string(group_name(kAllGroups[g]))] = {{"masked", per_group_masked[g].masked},
                                                      {"total", per_group_masked[g].total}};
  }
  nlohmann::json j = {{"policy", policy.to_json()},
                      {"seed", policy.seed},
                      {"num_voxels", num_voxels},
                      {"budget", budget},
                      {"num_masked", masked.size()},
                      {"realized_ratio", realized_ratio},
                      {"per_group_masked", groups},
                      {"masked", masked_list},
                      {"warnings", warnings}};
  if (std::holds_alternative<ClassTargetMasking>(policy.kind)) {
    j["target_count"] = target_count;
    j["target_truncated"] = target_truncated;
  }
  return j;
}

MaskAssignment mask_uniform(const VoxelGrid &grid, double rho, std::uint64_t seed) {
  check_rho(rho);
  const std::size_t budget = masking_budget(rho, grid.size());
  Rng rng(seed);
  auto picks = sample_without_replacement(grid.size(), budget, rng);
  return finish(grid, std::move(picks), MaskPolicy{UniformMasking{}, rho, seed, false}, budget);
}

MaskAssignment mask_class_target(const VoxelGrid &grid, ClassId target, std::uint32_t tau, double rho,
                                 std::uint64_t seed, bool strict_budget) {
  check_rho(rho);
  const auto targets = target_voxel_set(grid, target, tau);
  const std::size_t budget = masking_budget(rho, grid.size());
  MaskPolicy policy{ClassTargetMasking{target, tau}, rho, seed, strict_budget};

  std::vector<std::size_t> in_target;
  std::vector<std::size_t> rest;
  std::size_t t = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (t < targets.size() && grid.voxels()[i].index == targets[t]) {
      in_target.push_back(i);
      ++t;
    } else {
      rest.push_back(i);
    }
  }

  Rng rng(seed);
  std::vector<std::size_t> picks;
  std::vector<std::string> warnings;
  bool truncated = false;
  if (in_target.size() <= budget) {
    picks = in_target;
    for (auto k : sample_without_replacement(rest.size(), budget - in_target.size(), rng)) picks.push_back(rest[k]);
  } else {
    if (strict_budget) {
      throw Error(ErrorCode::TargetExceedsBudget, std::to_string(in_target.size()) + " target voxels of " +
                                                      std::string(class_name(target)) + " exceed budget " +
                                                      std::to_string(budget));
    }
    truncated = true;
    warnings.push_back("TargetExceedsBudget: |V| = " + std::to_string(in_target.size()) + " > budget " +
                       std::to_string(budget) + "; target set subsampled uniformly");
    for (auto k : sample_without_replacement(in_target.size(), budget, rng)) picks.push_back(in_target[k]);
  }
  auto out = finish(grid, std::move(picks), policy, budget);
  out.target_count = in_target.size();
  out.target_truncated = truncated;
  out.warnings = std::move(warnings);
  return out;
}

GroupAllocation allocate_group_budget(const std::array<std::size_t, kNumGroups> &sizes,
                                      const GroupWeights &weights, std::size_t budget) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (budget > total) throw Error(ErrorCode::InfeasibleBudget, "budget exceeds the number of voxels");
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (sizes[g] > 0 && !(weights[g] > 0.0)) throw Error(ErrorCode::InvalidArgument, "group weights must be positive");
  }

  GroupAllocation alloc;
  std::array<bool, kNumGroups> active{};
  for (std::size_t g = 0; g < kNumGroups; ++g) active[g] = sizes[g] > 0;
  std::size_t remaining = budget;
  double scale = 0.0;
  while (true) {
    double denom = 0.0;
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      if (active[g]) denom += weights[g] * static_cast<double>(sizes[g]);
    }
    if (denom == 0.0) break;
    scale = static_cast<double>(remaining) / denom;
    bool clamped = false;
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      if (active[g] && weights[g] * scale >= 1.0) {
        alloc.counts[g] = sizes[g];
        alloc.rates[g] = 1.0;
        remaining -= sizes[g];
        active[g] = false;
        clamped = true;
      }
    }
    if (!clamped) break;
  }

  std::array<double, kNumGroups> frac{};
  std::size_t assigned = 0;
  bool any_active = false;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (!active[g]) continue;
    any_active = true;
    alloc.rates[g] = weights[g] * scale;
    const double quota = alloc.rates[g] * static_cast<double>(sizes[g]);
    alloc.counts[g] = std::min(sizes[g], static_cast<std::size_t>(std::floor(quota)));
    frac[g] = quota - std::floor(quota);
    assigned += alloc.counts[g];
  }
  if (!any_active && remaining != 0) {
    throw Error(ErrorCode::InfeasibleBudget, std::to_string(remaining) + " masked voxels left after clamping all groups");
  }

  std::array<std::size_t, kNumGroups> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  // Floating error can leave the floors one count off in either direction.
  while (assigned < remaining) {
    bool moved = false;
    for (auto g : order) {
      if (assigned == remaining) break;
      if (active[g] && alloc.counts[g] < sizes[g]) {
        ++alloc.counts[g];
        ++assigned;
        moved = true;
      }
    }
    if (!moved) throw Error(ErrorCode::InfeasibleBudget, "cannot place remaining masked voxels");
  }
  while (assigned > remaining) {
    for (auto it = order.rbegin(); it != order.rend() && assigned > remaining; ++it) {
      if (active[*it] && alloc.counts[*it] > 0) {
        --alloc.counts[*it];
        --assigned;
      }
    }
  }
  return alloc;
}

MaskAssignment mask_importance_weighted(const VoxelGrid &grid, const GroupWeights &weights, double rho,
                                        std::uint64_t seed) {
  check_rho(rho);
  std::array<std::vector<std::size_t>, kNumGroups> members;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto &g = grid.voxels()[i].group;
    if (!g) throw Error(ErrorCode::InvalidArgument, "importance masking needs a grid with assigned groups");
    members[static_cast<std::size_t>(*g)].push_back(i);
  }
  std::array<std::size_t, kNumGroups> sizes{};
  for (std::size_t g = 0; g < kNumGroups; ++g) sizes[g] = members[g].size();
  const std::size_t budget = masking_budget(rho, grid.size());
  const auto alloc = allocate_group_budget(sizes, weights, budget);

  Rng rng(seed);
  std::vector<std::size_t> picks;
  picks.reserve(budget);
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    for (auto k : sample_without_replacement(sizes[g], alloc.counts[g], rng)) picks.push_back(members[g][k]);
  }
  MaskPolicy policy{ImportanceMasking{weights}, rho, seed, false};
  policy.validate();
  return finish(grid, std::move(picks), policy, budget);
}

MaskAssignment generate_mask(const VoxelGrid &grid, const MaskPolicy &policy) {
  policy.validate();
  return std::visit(
      [&](const auto &k) -> MaskAssignment {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, UniformMasking>) {
          return mask_uniform(grid, policy.rho, policy.seed);
        } else if constexpr (std::is_same_v<T, ClassTargetMasking>) {
          return mask_class_target(grid, k.target, k.tau, policy.rho, policy.seed, policy.strict_budget);
        } else {
          return mask_importance_weighted(grid, k.weights, policy.rho, policy.seed);
        }
      },
      policy.kind);
}

MaskSplit apply_mask(const VoxelGrid &grid, const MaskAssignment &assignment) {
  if (assignment.grid_fingerprint != grid.fingerprint() || assignment.num_voxels != grid.size() ||
      assignment.masked.size() + assignment.visible.size() != grid.size()) {
    throw Error(ErrorCode::GridMismatch, "mask assignment was produced for a different grid");
  }
  MaskSplit split;
  split.masked.reserve(assignment.masked.size());
  split.visible.reserve(assignment.visible.size());
  std::size_t m = 0;
  for (const auto &v : grid.voxels()) {
    if (m < assignment.masked.size() && assignment.masked[m] == v.index) {
      split.masked.push_back(&v);
      ++m;
    } else {
      split.visible.push_back(&v);
    }
  }
  if (m != assignment.masked.size()) throw Error(ErrorCode::GridMismatch, "masked voxel not in grid");
  return split;
}

}  // namespace semmask
