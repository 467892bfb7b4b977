#pragma once

// Desk-scale masked voxel autoencoder. It is a stand-in for a full camera-LiDAR
// masked autoencoder, small enough to train in seconds, with every loss term of
// the pretraining objective present:
//
//   encoder   per visible voxel, tanh(W_e [stats ; position])
//             stats = log-count, centroid offset and standard deviation per axis
//   context   mean of the visible encodings
//   decoder   per domain voxel, f = tanh(W_d [token ; position ; context]) with
//             token = encoding (visible) or the learned mask token (masked/empty);
//             f is the 128-d decoder-side voxel feature
//   heads     occupancy logit, K point offsets from the voxel center, and the
//             point-wise semantic head on [f ; Δp]
//   image     P synthetic patches; masked patches are predicted linearly from
//             the mean visible patch
//
// The reconstruction domain is every occupied voxel plus its empty 6-neighbours
// inside the grid range; those empty voxels carry the occupancy negatives.

#include <cstdint>
#include <map>
#include <ostream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "semmask/losses.hpp"
#include "semmask/masking.hpp"
#include "semmask/nn.hpp"
#include "semmask/recon_metrics.hpp"
#include "semmask/semantic_head.hpp"
#include "semmask/voxelizer.hpp"

namespace semmask {

struct ToyModelConfig {
  std::size_t feature_dim = kDecoderFeatureDim;
  std::size_t encoder_hidden = 32;
  std::size_t points_per_voxel_out = 8;
  std::uint64_t seed = 0;  // model initialization stream
  double learning_rate = 0.05;
  std::size_t steps = 200;
  std::vector<std::size_t> head_hidden{64, 64};
  LabelSource label_source = LabelSource::Mapped;
  std::size_t image_patches = 16;
  std::size_t patch_pixels = 8;
  ChamferVariant chamfer_variant = ChamferVariant::Euclidean;
  Exec exec = Exec::Parallel;

  void validate() const;
  SemanticHeadConfig head_config() const;
  nlohmann::json to_json() const;
  static ToyModelConfig from_json(const nlohmann::json &j);
};

inline constexpr std::size_t kVoxelStatDim = 7;
inline constexpr std::size_t kPositionDim = 3;

/// A voxelized, grouped scene with everything the model consumes precomputed.
struct ToyScene {
  VoxelGrid grid;                          // groups assigned
  std::vector<VoxelIndex> domain;          // ascending
  std::vector<std::uint8_t> domain_occupied;
  std::vector<std::size_t> domain_to_voxel;  // position in grid.voxels(), or npos for empty voxels
  std::vector<std::size_t> voxel_to_domain;
  Matrix stats;      // per grid voxel, kVoxelStatDim columns
  Matrix positions;  // per domain voxel, kPositionDim columns
  PatchImage image;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

/// Voxelizes and groups a labeled (detection-space) cloud. The image is drawn from `image_seed`.
ToyScene prepare_scene(std::shared_ptr<const PointCloud> cloud, const VoxelGridConfig &voxel_config,
                       const LevelMap &levels, std::uint64_t image_seed, std::size_t image_patches = 16,
                       std::size_t patch_pixels = 8);

enum class SemanticBranch { Off, On };

class ToyModel {
 public:
  ToyModel() = default;
  /// Reconstruction parameters come from config.seed; the semantic head from a
  /// separate stream of it, so toggling the branch never shifts other draws.
  explicit ToyModel(const ToyModelConfig &config);

  const ToyModelConfig &config() const { return config_; }
  const SemanticHead &semantic_head() const { return head_; }

  struct Outputs {
    Matrix features;        // domain rows x feature_dim
    Matrix occupancy;       // domain rows x 1
    Matrix point_offsets;   // domain rows x 3K (voxel-size units)
  };
  Outputs forward(const ToyScene &scene, const MaskAssignment &assignment) const;

  /// Predicted point sets of the masked voxels and occupancy (logit > 0) over the domain.
  Reconstruction reconstruct(const ToyScene &scene, const MaskAssignment &assignment) const;
  /// Decoder-side features for every voxel of the reconstruction domain.
  std::map<VoxelIndex, std::vector<double>> decoder_features(const ToyScene &scene,
                                                             const MaskAssignment &assignment) const;

  struct StepResult {
    LossBreakdown losses;
  };
  /// Loss and one gradient-descent update over the corpus; masks[s] and
  /// image_masks[s] belong to scenes[s]. With update = false only the losses are computed.
  StepResult step(std::span<const ToyScene> scenes, std::span<const MaskAssignment> masks,
                  std::span<const std::vector<std::uint8_t>> image_masks, double lambda_sem, SemanticBranch branch,
                  bool update);

  /// Flat copy of every parameter, in a fixed order, for equality checks.
  std::vector<double> reconstruction_parameters() const;

  friend bool operator==(const ToyModel &a, const ToyModel &b);

 private:
  struct Trace;
  Trace trace(const ToyScene &scene, const MaskAssignment &assignment) const;

  ToyModelConfig config_;
  DenseLayer encoder_;
  std::vector<double> mask_token_;
  DenseLayer decoder_;
  DenseLayer occ_head_;
  DenseLayer point_head_;
  DenseLayer image_head_;
  SemanticHead head_;
};

/// Seed of an independent stream: (root, step, scene, purpose).
std::uint64_t stream_seed(std::uint64_t root, std::uint64_t step, std::uint64_t scene, std::uint64_t purpose);

/// Image patch mask at ratio rho, one flag per patch.
std::vector<std::uint8_t> image_patch_mask(std::size_t patches, double rho, std::uint64_t seed);

struct TrainResult {
  ToyModel model;
  std::vector<LossBreakdown> log;  // steps + 1 entries; entry t is evaluated before update t
  std::vector<std::vector<std::size_t>> masked_counts;  // [step][scene]
};

/// Plain gradient descent for config.steps steps. The policy's seed roots the
/// per-step masking streams; the policy kind decides how voxels are masked.
TrainResult train_toy(const ToyModelConfig &config, std::span<const ToyScene> scenes, const MaskPolicy &policy,
                      double lambda_sem, SemanticBranch branch = SemanticBranch::On);

void write_loss_log_csv(std::span<const LossBreakdown> log, std::ostream &out);

struct AnalysisConfig {
  std::uint32_t tau = 1;
  double rho = 0.7;
  std::vector<std::uint64_t> seeds{0};
  std::vector<ClassId> classes;  // empty: every detection class present in the corpus
  bool strict_budget = false;
  RankingConfig ranking;
  ReconstructionEvalConfig eval;

  nlohmann::json to_json() const;
};

struct AnalysisCell {
  ClassId class_id = 0;
  std::size_t scene = 0;
  std::uint64_t seed = 0;
  std::size_t num_voxels = 0;
  std::size_t masked = 0;
  std::size_t target_count = 0;
  bool target_truncated = false;
  ReconMetrics metrics;
  std::optional<std::string> error;
};

struct AnalysisRun {
  AnalysisConfig config;
  std::vector<ClassId> classes;
  std::vector<AnalysisCell> cells;  // class-major, then scene, then seed
  std::map<ClassId, ReconMetrics> per_class;
  ImportanceReport report;
  bool partial = false;

  nlohmann::json mask_stats_json() const;
};

/// Class-targeted masking per (class, scene, seed) cell with a frozen model;
/// metrics are averaged over scenes and seeds, then ranked. The masking seed of
/// a cell is stream_seed(seed, 0, scene, 0), shared by all classes.
AnalysisRun run_class_importance_analysis(const ToyModel &model, std::span<const ToyScene> scenes,
                                          const AnalysisConfig &config);

/// Retrain-per-class mode: one model per class, trained under that class's
/// target masking (rho, tau) from `mask_root`, evaluates that class's cells.
AnalysisRun run_class_importance_analysis_retrained(const ToyModelConfig &model_config,
                                                    std::span<const ToyScene> scenes, const AnalysisConfig &config,
                                                    std::uint64_t mask_root, double lambda_sem = 0.0);

/// Detection classes with at least one point in the corpus.
std::vector<ClassId> classes_present(std::span<const ToyScene> scenes);

struct ImportancePolicy {
  MaskPolicy policy;  // ImportanceMasking
  LevelMap levels;
  std::map<ClassId, double> class_weights;
  std::vector<ClassId> filled_classes;  // classes missing from the report, given `fill_level`

  nlohmann::json to_json() const;
  static ImportancePolicy from_json(const nlohmann::json &j);
};

/// Turns a ranked report into the importance-weighted policy and level map.
/// Classes missing from the report raise MissingLevel unless `fill_level` is set.
ImportancePolicy build_policy_from_report(const ImportanceReport &report, const GroupWeights &weight_table,
                                          double rho, std::uint64_t seed,
                                          std::optional<Level> fill_level = std::nullopt);

/// Recovers each class level by matching its weight against the group weight table.
LevelMap levels_from_policy(const ImportancePolicy &policy);

struct PolicyVariant {
  std::string name;
  MaskPolicy policy;
  double lambda_sem = 0.0;
  SemanticBranch branch = SemanticBranch::On;
};

struct PolicyOutcome {
  std::string name;
  std::string kind;
  double rho = 0.0;
  double lambda_sem = 0.0;
  std::vector<LossBreakdown> log;
  ReconMetrics final_metrics;  // under uniform masking with the evaluation seeds
  /// [scene][seed] assignments from this policy, for count comparisons.
  std::vector<std::vector<std::size_t>> masked_totals;
  std::vector<std::vector<std::array<GroupTally, kNumGroups>>> group_tallies;
};

struct ComparisonReport {
  std::vector<PolicyOutcome> outcomes;
  bool budgets_equal = true;

  void write_csv(std::ostream &out) const;
  nlohmann::json to_json() const;
};

/// Trains one model per variant from the same model seed and compares them.
/// Throws PolicyCountError for fewer than two variants and BudgetMismatch when
/// two policies mask different numbers of voxels on any scene and seed.
ComparisonReport compare_policies(const ToyModelConfig &config, std::span<const ToyScene> scenes,
                                  std::span<const PolicyVariant> variants, std::span<const std::uint64_t> seeds);

}  // namespace semmask
