#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "semmask/common.hpp"
#include "semmask/voxelizer.hpp"

namespace semmask {

/// Masking weight per group, indexed by Group (High, Medium, Low, Background).
using GroupWeights = std::array<double, kNumGroups>;

/// Table 2 weights: High 0.75, Medium 0.95, Low 1.05, Background 1.20.
GroupWeights default_group_weights();
/// Parses "high=0.75,medium=0.95,low=1.05,background=1.20"; all four groups required.
GroupWeights parse_group_weights(std::string_view text);
std::string format_group_weights(const GroupWeights &w);

struct UniformMasking {};
struct ClassTargetMasking {
  ClassId target = 0;
  std::uint32_t tau = 1;
};
struct ImportanceMasking {
  GroupWeights weights = default_group_weights();
};

struct MaskPolicy {
  std::variant<UniformMasking, ClassTargetMasking, ImportanceMasking> kind;
  double rho = 0.7;
  std::uint64_t seed = 0;
  /// Class-target only: error on |V^(c)| > budget instead of subsampling V^(c).
  bool strict_budget = false;

  void validate() const;
  std::string kind_name() const;  // "uniform", "class-target", "importance"
  nlohmann::json to_json() const;
  static MaskPolicy from_json(const nlohmann::json &j);
};

struct GroupTally {
  std::size_t masked = 0;
  std::size_t total = 0;
};

struct MaskAssignment {
  std::vector<VoxelIndex> masked;   // ascending
  std::vector<VoxelIndex> visible;  // ascending
  double realized_ratio = 0.0;
  /// Only voxels that carry a group are tallied.
  std::array<GroupTally, kNumGroups> per_group_masked{};
  MaskPolicy policy;
  std::size_t num_voxels = 0;
  std::size_t budget = 0;
  std::uint64_t grid_fingerprint = 0;
  /// Class-target bookkeeping: |V^(c)| and whether it had to be subsampled.
  std::size_t target_count = 0;
  bool target_truncated = false;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

/// Exactly round(rho * N) voxels drawn uniformly without replacement.
MaskAssignment mask_uniform(const VoxelGrid &grid, double rho, std::uint64_t seed);

/// Masks all of V^(c), then fills the budget uniformly from the other voxels.
/// With V^(c) empty the draw is identical to mask_uniform for the same seed.
MaskAssignment mask_class_target(const VoxelGrid &grid, ClassId target, std::uint32_t tau, double rho,
                                 std::uint64_t seed, bool strict_budget = false);

/// Per-group counts from allocate_group_budget, sampled uniformly within each
/// group. The grid must carry groups (see assign_groups).
MaskAssignment mask_importance_weighted(const VoxelGrid &grid, const GroupWeights &weights, double rho,
                                        std::uint64_t seed);

MaskAssignment generate_mask(const VoxelGrid &grid, const MaskPolicy &policy);

struct GroupAllocation {
  std::array<std::size_t, kNumGroups> counts{};
  /// Final per-group masking probability min(1, w_g * s).
  std::array<double, kNumGroups> rates{};
};

/// Splits `budget` masked voxels over groups of the given sizes.
///
/// Waterfall normalization: with the active (non-empty, unclamped) groups,
/// s = R / sum_g w_g N_g where R is the budget left. Groups with w_g s >= 1 are
/// masked completely and leave the pool, and s is recomputed. The remaining
/// real-valued quotas w_g s N_g are floored and the leftover counts go to the
/// largest fractional parts (ties to the more important group). The counts
/// always sum to `budget`.
GroupAllocation allocate_group_budget(const std::array<std::size_t, kNumGroups> &sizes,
                                      const GroupWeights &weights, std::size_t budget);

struct MaskSplit {
  std::vector<const Voxel *> visible;
  std::vector<const Voxel *> masked;
};

/// Splits the grid's voxels by the assignment. Throws GridMismatch when the
/// assignment was produced for a different grid.
MaskSplit apply_mask(const VoxelGrid &grid, const MaskAssignment &assignment);

}  // namespace semmask
