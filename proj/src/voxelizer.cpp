#include "semmask/voxelizer.hpp"

#include <algorithm>
#include <cctype>

#include "semmask/kernels.hpp"

namespace semmask {

namespace {

Vec3 vec3_from_json(const nlohmann::json &j, const char *what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::ParseError, std::string(what) + " must be a 3-element array");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::uint64_t fnv1a(std::uint64_t h, std::int32_t v) {
  auto u = static_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) {
    h ^= (u >> (8 * i)) & 0xFFU;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

void VoxelGridConfig::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(voxel_size[a] > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel_size must be positive");
    if (!(range_max[a] > range_min[a])) throw Error(ErrorCode::InvalidArgument, "range_max must exceed range_min");
  }
}

VoxelGridConfig VoxelGridConfig::unit(const Vec3 &extent) {
  VoxelGridConfig cfg;
  cfg.voxel_size = {1.0, 1.0, 1.0};
  cfg.range_min = {0.0, 0.0, 0.0};
  cfg.range_max = extent;
  return cfg;
}

VoxelGridConfig VoxelGridConfig::from_json(const nlohmann::json &j) {
  VoxelGridConfig cfg;
  try {
    if (j.contains("voxel_size")) cfg.voxel_size = vec3_from_json(j["voxel_size"], "voxel_size");
    if (j.contains("range_min")) cfg.range_min = vec3_from_json(j["range_min"], "range_min");
    if (j.contains("range_max")) cfg.range_max = vec3_from_json(j["range_max"], "range_max");
    cfg.max_points_per_voxel = j.value("max_points_per_voxel", std::size_t{0});
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, std::string("voxel config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

nlohmann::json VoxelGridConfig::to_json() const {
  auto v = [](const Vec3 &x) { return nlohmann::json::array({x.x, x.y, x.z}); };
  return {{"voxel_size", v(voxel_size)},
          {"range_min", v(range_min)},
          {"range_max", v(range_max)},
          {"max_points_per_voxel", max_points_per_voxel}};
}

VoxelGrid::VoxelGrid(VoxelGridConfig config, std::shared_ptr<const PointCloud> source, std::vector<Voxel> voxels,
                     VoxelizeStats stats)
    : config_(config), source_(std::move(source)), voxels_(std::move(voxels)), stats_(stats) {
  std::sort(voxels_.begin(), voxels_.end(), [](const Voxel &a, const Voxel &b) { return a.index < b.index; });
  lookup_.reserve(voxels_.size());
  fingerprint_ = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < voxels_.size(); ++i) {
    lookup_.emplace(voxels_[i].index, i);
    fingerprint_ = fnv1a(fnv1a(fnv1a(fingerprint_, voxels_[i].index.x), voxels_[i].index.y), voxels_[i].index.z);
  }
}

const Voxel *VoxelGrid::find(const VoxelIndex &idx) const {
  auto it = lookup_.find(idx);
  return it == lookup_.end() ? nullptr : &voxels_[it->second];
}

const Voxel &VoxelGrid::at(const VoxelIndex &idx) const {
  const Voxel *v = find(idx);
  if (v == nullptr) throw Error(ErrorCode::UnknownVoxel, to_string(idx));
  return *v;
}

Vec3 VoxelGrid::center_of(const VoxelIndex &idx) const {
  return {config_.range_min.x + (idx.x + 0.5) * config_.voxel_size.x,
          config_.range_min.y + (idx.y + 0.5) * config_.voxel_size.y,
          config_.range_min.z + (idx.z + 0.5) * config_.voxel_size.z};
}

VoxelGrid VoxelGrid::with_voxels(std::vector<Voxel> voxels) const {
  return VoxelGrid(config_, source_, std::move(voxels), stats_);
}

VoxelGrid voxelize(std::shared_ptr<const PointCloud> cloud, const VoxelGridConfig &config, Exec exec) {
  config.validate();
  const auto keys = kernels::voxel_keys(cloud->points, config, exec);

  const bool labeled = cloud->labeled();
  const std::size_t slots = !labeled ? 0 : (cloud->label_space == LabelSpace::Detection ? kNumMappedLabels
                                                                                        : kNumRawLabels);
  VoxelizeStats stats;
  stats.points_in = cloud->size();
  std::unordered_map<VoxelIndex, std::size_t, VoxelIndexHash> slot_of;
  std::vector<Voxel> voxels;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!keys[i]) {
      ++stats.dropped_out_of_range;
      continue;
    }
    auto [it, inserted] = slot_of.try_emplace(*keys[i], voxels.size());
    if (inserted) {
      Voxel v;
      v.index = *keys[i];
      v.class_counts.assign(slots, 0);
      voxels.push_back(std::move(v));
    }
    Voxel &v = voxels[it->second];
    if (config.max_points_per_voxel != 0 && v.point_ids.size() >= config.max_points_per_voxel) {
      ++stats.dropped_over_cap;
      continue;
    }
    v.point_ids.push_back(static_cast<std::uint32_t>(i));
    if (labeled) {
      const std::uint8_t label = (*cloud->labels)[i];
      if (label == kIgnoreLabel) continue;
      if (label >= slots) {
        throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label) + " at point " + std::to_string(i));
      }
      ++v.class_counts[label];
    }
  }
  VoxelGrid grid(config, cloud, std::move(voxels), stats);
  // Centers depend only on the index; fill them after sorting.
  std::vector<Voxel> filled = grid.voxels();
  for (auto &v : filled) v.center = grid.center_of(v.index);
  return grid.with_voxels(std::move(filled));
}

VoxelGrid voxelize(const PointCloud &cloud, const VoxelGridConfig &config, Exec exec) {
  return voxelize(std::make_shared<const PointCloud>(cloud), config, exec);
}

std::vector<Vec3> local_offsets(const VoxelGrid &grid, const VoxelIndex &index) {
  const Voxel &v = grid.at(index);
  std::vector<Vec3> out;
  out.reserve(v.point_ids.size());
  for (auto id : v.point_ids) out.push_back(grid.source().points[id].position - v.center);
  return out;
}

std::vector<VoxelIndex> target_voxel_set(const VoxelGrid &grid, ClassId c, std::uint32_t tau) {
  if (!grid.labeled()) throw Error(ErrorCode::UnlabeledGrid, "target voxel set needs a labeled grid");
  if (tau < 1) throw Error(ErrorCode::InvalidArgument, "tau must be at least 1");
  std::vector<VoxelIndex> out;
  for (const auto &v : grid.voxels()) {
    if (v.count_of(c) >= tau) out.push_back(v.index);
  }
  return out;
}

Group group_of(Level level) {
  switch (level) {
    case Level::High: return Group::High;
    case Level::Medium: return Group::Medium;
    case Level::Low: return Group::Low;
  }
  return Group::Background;
}

std::string_view level_name(Level level) { return group_name(group_of(level)); }

Level level_from_name(std::string_view name) {
  switch (group_from_name(name)) {
    case Group::High: return Level::High;
    case Group::Medium: return Level::Medium;
    case Group::Low: return Level::Low;
    case Group::Background: break;
  }
  throw Error(ErrorCode::InvalidArgument, "background is not an importance level");
}

LevelMap default_levels() {
  return {{0, Level::High},   {1, Level::High},   {2, Level::High}, {3, Level::Medium}, {4, Level::Medium},
          {5, Level::Medium}, {6, Level::Medium}, {7, Level::Medium}, {8, Level::Low},  {9, Level::Low}};
}

std::vector<ClassId> default_priority() { return {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}; }

VoxelGrid assign_groups(const VoxelGrid &grid, const LevelMap &levels, const std::vector<ClassId> &priority) {
  if (!grid.labeled()) throw Error(ErrorCode::UnlabeledGrid, "group assignment needs a labeled grid");
  if (grid.source().label_space != LabelSpace::Detection) {
    throw Error(ErrorCode::UnlabeledGrid, "group assignment needs detection-space labels");
  }
  for (ClassId c = 0; c < kNumDetectionClasses; ++c) {
    if (!levels.contains(c)) {
      throw Error(ErrorCode::IncompleteLevels, "no importance level for " + std::string(class_name(c)));
    }
  }
  std::vector<std::size_t> rank(kNumDetectionClasses, priority.size());
  for (std::size_t i = 0; i < priority.size(); ++i) {
    if (priority[i] < kNumDetectionClasses && rank[priority[i]] == priority.size()) rank[priority[i]] = i;
  }

  std::vector<Voxel> out = grid.voxels();
  for (auto &v : out) {
    std::optional<ClassId> best;
    for (ClassId c = 0; c < kNumDetectionClasses; ++c) {
      if (v.count_of(c) == 0) continue;
      if (!best) {
        best = c;
        continue;
      }
      const auto lc = levels.at(c);
      const auto lb = levels.at(*best);
      if (lc < lb || (lc == lb && rank[c] < rank[*best])) best = c;
    }
    if (best) {
      v.assigned_class = *best;
      v.group = group_of(levels.at(*best));
    } else {
      v.assigned_class = kBackground;
      v.group = Group::Background;
    }
  }
  return grid.with_voxels(std::move(out));
}

void export_grid_jsonl(const VoxelGrid &grid, std::ostream &out) {
  for (const auto &v : grid.voxels()) {
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t c = 0; c < v.class_counts.size(); ++c) {
      if (v.class_counts[c] == 0) continue;
      const std::string key = grid.source().label_space == LabelSpace::Detection
                                  ? std::string(class_name(static_cast<ClassId>(c)))
                                  : std::to_string(c);
      counts[key] = v.class_counts[c];
    }
    nlohmann::json row = {{"index", {v.index.x, v.index.y, v.index.z}},
                          {"center", {v.center.x, v.center.y, v.center.z}},
                          {"num_points", v.point_ids.size()},
                          {"class_counts", counts}};
    row["assigned_class"] = v.assigned_class ? nlohmann::json(std::string(class_name(*v.assigned_class)))
                                             : nlohmann::json(nullptr);
    row["group"] = v.group ? nlohmann::json(std::string(group_name(*v.group))) : nlohmann::json(nullptr);
    out << row.dump() << '\n';
  }
}

std::map<std::size_t, std::size_t> occupancy_histogram(const VoxelGrid &grid) {
  std::map<std::size_t, std::size_t> hist;
  for (const auto &v : grid.voxels()) ++hist[v.point_ids.size()];
  return hist;
}

}  // namespace semmask
