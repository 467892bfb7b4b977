#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "semmask/common.hpp"
#include "semmask/pointcloud_io.hpp"

namespace semmask {

struct VoxelGridConfig {
  Vec3 voxel_size{0.075, 0.075, 0.2};
  Vec3 range_min{-54.0, -54.0, -5.0};
  Vec3 range_max{54.0, 54.0, 3.0};
  /// 0 means unlimited. Points past the cap are dropped (and counted).
  std::size_t max_points_per_voxel = 0;

  void validate() const;

  /// Unit voxels over [0, extent), the desk-scale setting.
  static VoxelGridConfig unit(const Vec3 &extent);

  static VoxelGridConfig from_json(const nlohmann::json &j);
  nlohmann::json to_json() const;
};

struct Voxel {
  VoxelIndex index;
  Vec3 center;
  std::vector<std::uint32_t> point_ids;  // ascending
  /// n_v^(c), indexed by label id. Empty for unlabeled clouds.
  std::vector<std::uint32_t> class_counts;
  std::optional<ClassId> assigned_class;
  std::optional<Group> group;

  std::uint32_t count_of(ClassId c) const { return c < class_counts.size() ? class_counts[c] : 0; }
};

struct VoxelizeStats {
  std::size_t points_in = 0;
  std::size_t dropped_out_of_range = 0;
  std::size_t dropped_over_cap = 0;
  std::size_t dropped() const { return dropped_out_of_range + dropped_over_cap; }
};

/// Sparse voxel grid over a point cloud. Voxels are stored sorted by index.
class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(VoxelGridConfig config, std::shared_ptr<const PointCloud> source, std::vector<Voxel> voxels,
            VoxelizeStats stats);

  const VoxelGridConfig &config() const { return config_; }
  const PointCloud &source() const { return *source_; }
  std::shared_ptr<const PointCloud> source_ptr() const { return source_; }
  const std::vector<Voxel> &voxels() const { return voxels_; }
  const VoxelizeStats &stats() const { return stats_; }
  std::size_t size() const { return voxels_.size(); }
  bool empty() const { return voxels_.empty(); }
  bool labeled() const { return source_ && source_->labeled(); }

  const Voxel *find(const VoxelIndex &idx) const;
  const Voxel &at(const VoxelIndex &idx) const;  // throws UnknownVoxel
  bool contains(const VoxelIndex &idx) const { return find(idx) != nullptr; }

  Vec3 center_of(const VoxelIndex &idx) const;

  /// Order-sensitive digest of the occupied index set; used to match masks to grids.
  std::uint64_t fingerprint() const { return fingerprint_; }

  VoxelGrid with_voxels(std::vector<Voxel> voxels) const;

 private:
  VoxelGridConfig config_;
  std::shared_ptr<const PointCloud> source_;
  std::vector<Voxel> voxels_;
  std::unordered_map<VoxelIndex, std::size_t, VoxelIndexHash> lookup_;
  VoxelizeStats stats_;
  std::uint64_t fingerprint_ = 0;
};

VoxelGrid voxelize(std::shared_ptr<const PointCloud> cloud, const VoxelGridConfig &config,
                   Exec exec = Exec::Parallel);
VoxelGrid voxelize(const PointCloud &cloud, const VoxelGridConfig &config, Exec exec = Exec::Parallel);

/// Δp = p - center for each member point, in point_ids order.
std::vector<Vec3> local_offsets(const VoxelGrid &grid, const VoxelIndex &index);

/// V^(c): voxels holding at least tau points of class c, ascending.
std::vector<VoxelIndex> target_voxel_set(const VoxelGrid &grid, ClassId c, std::uint32_t tau);

enum class Level : std::uint8_t { High = 0, Medium = 1, Low = 2 };
Group group_of(Level level);
std::string_view level_name(Level level);
Level level_from_name(std::string_view name);

using LevelMap = std::map<ClassId, Level>;

/// Table 2 importance levels.
LevelMap default_levels();
/// car, pedestrian, construction_vehicle, ... (importance-table row order).
std::vector<ClassId> default_priority();

/// Each voxel takes the most important class present (level first, then
/// position in `priority`); background-only voxels form the Background group.
VoxelGrid assign_groups(const VoxelGrid &grid, const LevelMap &levels,
                        const std::vector<ClassId> &priority = default_priority());

/// One JSON object per voxel: index, center, assigned_class, group, class_counts.
void export_grid_jsonl(const VoxelGrid &grid, std::ostream &out);

/// Histogram of points per voxel: count -> number of voxels.
std::map<std::size_t, std::size_t> occupancy_histogram(const VoxelGrid &grid);

}  // namespace semmask
