#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "semmask/common.hpp"
#include "semmask/kernels.hpp"
#include "semmask/masking.hpp"
#include "semmask/voxelizer.hpp"

namespace semmask {

using kernels::ChamferVariant;

/// Mean nearest-neighbour distance from each point of `a` to `b`. Not symmetric.
/// Throws EmptySet when either side is empty.
double chamfer_directional(std::span<const Vec3> a, std::span<const Vec3> b,
                           ChamferVariant variant = ChamferVariant::Euclidean);

using OccupancyMap = std::map<VoxelIndex, bool>;

/// Fraction of `domain` where predicted and true occupancy agree. Voxels missing
/// from a map count as empty there.
double occupancy_accuracy(const OccupancyMap &predicted, const OccupancyMap &truth,
                          std::span<const VoxelIndex> domain);

struct ReconMetrics {
  double chamfer_gt_to_pred = 0.0;
  double chamfer_pred_to_gt = 0.0;
  double occupancy_accuracy = 1.0;
  std::size_t evaluated_voxels = 0;
  std::size_t unreconstructed_voxels = 0;

  nlohmann::json to_json() const;
};

enum class ChamferAggregation { PerVoxel, Global };

struct ReconstructionEvalConfig {
  ChamferVariant variant = ChamferVariant::Euclidean;
  ChamferAggregation aggregation = ChamferAggregation::PerVoxel;
  Exec exec = Exec::Parallel;
};

/// A reconstruction of one scene: predicted points per voxel and predicted
/// occupancy over a voxel domain.
struct Reconstruction {
  std::map<VoxelIndex, std::vector<Vec3>> points;
  OccupancyMap occupancy;
};

/// Chamfer over the masked voxels (per-voxel then averaged, or globally), and
/// occupancy accuracy over the union of occupied and predicted-map voxels.
/// Voxels with an empty prediction are left out of the Chamfer mean and counted
/// in `unreconstructed_voxels`. Throws DomainMismatch when an occupied voxel has
/// no occupancy prediction.
ReconMetrics evaluate_reconstruction(const VoxelGrid &truth, const Reconstruction &recon,
                                     const MaskAssignment &assignment, const ReconstructionEvalConfig &config = {});

struct RankingConfig {
  /// Adds occupancy accuracy (lower is worse, so ranked descending) as a third column.
  bool include_occupancy = false;
  double high_threshold = 7.5;    // mean rank >= -> High
  double medium_threshold = 5.0;  // mean rank >= -> Medium, else Low
  GroupWeights weights = default_group_weights();
};

struct ImportanceRow {
  ClassId class_id = 0;
  ReconMetrics metrics;
  double rank_gt_to_pred = 0.0;
  double rank_pred_to_gt = 0.0;
  std::optional<double> rank_occupancy;
  double mean_rank = 0.0;
  Level level = Level::Low;
  double weight = 1.0;
};

struct ImportanceReport {
  std::vector<ImportanceRow> rows;  // ascending class id
  double background_weight = 1.2;

  const ImportanceRow &row(ClassId c) const;
  LevelMap levels() const;
  void write_csv(std::ostream &out) const;
  nlohmann::json to_json() const;
  static ImportanceReport read_csv(std::istream &in);
};

/// Fractional ranks, 1 = smallest value; ties share the average of their ranks.
std::vector<double> fractional_ranks(std::span<const double> values);

/// Ranks each Chamfer column ascending (largest degradation gets rank C), averages
/// the ranks and maps mean ranks to levels and weights.
ImportanceReport rank_importance(const std::map<ClassId, ReconMetrics> &per_class,
                                 const RankingConfig &config = {},
                                 std::span<const ClassId> expected_classes = {});

/// Reads per-class metrics from a CSV with header
/// class,chamfer_gt_to_pred,chamfer_pred_to_gt[,occupancy_accuracy,...].
std::map<ClassId, ReconMetrics> read_metrics_csv(std::istream &in);

}  // namespace semmask
