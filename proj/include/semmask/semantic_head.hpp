#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "semmask/common.hpp"
#include "semmask/losses.hpp"
#include "semmask/masking.hpp"
#include "semmask/nn.hpp"
#include "semmask/voxelizer.hpp"

namespace semmask {

/// Supervision label space of the point-wise head.
enum class LabelSource { Mapped, Raw };

inline constexpr std::size_t kDecoderFeatureDim = 128;
inline constexpr std::size_t kOffsetDim = 3;

struct SemanticHeadConfig {
  std::size_t feature_dim = kDecoderFeatureDim;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t num_classes = kNumMappedLabels;
  Activation activation = Activation::Tanh;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return feature_dim + kOffsetDim; }
  std::vector<std::size_t> dims() const;
};

/// Point-wise MLP classifier over z = [decoder voxel feature ; offset from voxel center].
class SemanticHead {
 public:
  SemanticHead() = default;
  /// Uniform fan-in scaled initialization from config.seed.
  explicit SemanticHead(const SemanticHeadConfig &config);
  SemanticHead(const SemanticHeadConfig &config, Mlp mlp);

  static SemanticHead zeros(const SemanticHeadConfig &config);

  const SemanticHeadConfig &config() const { return config_; }
  const Mlp &mlp() const { return mlp_; }
  Mlp &mlp() { return mlp_; }
  std::size_t input_dim() const { return config_.input_dim(); }
  std::size_t num_classes() const { return config_.num_classes; }

  friend bool operator==(const SemanticHead &a, const SemanticHead &b) { return a.mlp_ == b.mlp_; }

 private:
  SemanticHeadConfig config_;
  Mlp mlp_;
};

struct SemanticInput {
  std::vector<double> z;  // feature_dim decoder components, then the 3 offset components
  std::uint8_t label = 0;
  std::uint32_t point_id = 0;
  VoxelIndex voxel;
};

/// One input per labeled point of every voxel in the reconstruction domain
/// (masked and visible). Throws MissingFeature when such a voxel has no feature.
std::vector<SemanticInput> build_semantic_inputs(const VoxelGrid &grid,
                                                 const std::map<VoxelIndex, std::vector<double>> &decoder_features,
                                                 const MaskAssignment &assignment,
                                                 LabelSource source = LabelSource::Mapped);

Matrix stack_inputs(std::span<const SemanticInput> inputs);
std::vector<std::uint8_t> stack_labels(std::span<const SemanticInput> inputs);

/// Raw logits, one row per input.
Matrix semantic_forward(const SemanticHead &head, std::span<const SemanticInput> inputs, Exec exec = Exec::Parallel);
Matrix semantic_forward(const SemanticHead &head, const Matrix &z, Exec exec = Exec::Parallel,
                        Mlp::Cache *cache = nullptr);

struct SemanticStep {
  double loss = 0.0;
  Mlp::Grads grads;
  Matrix grad_input;  // dL/dz, rows x input_dim
};

/// L_sem and its gradients w.r.t. the head parameters and the inputs.
SemanticStep semantic_loss_and_grads(const SemanticHead &head, const Matrix &z, std::span<const std::uint8_t> labels,
                                     Exec exec = Exec::Parallel);

struct GradCheckBlock {
  std::string name;  // e.g. "layer1.weight"
  std::size_t size = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Compares analytic parameter gradients of L_sem with central differences.
/// Relative error per entry is |a - n| / max(|a|, |n|, kGradCheckFloor).
/// A double central difference at step 1e-5 resolves about 5e-11 for a loss of
/// order one, so smaller entries are held to tolerance * kGradCheckFloor absolute.
inline constexpr double kGradCheckFloor = 1e-5;
GradCheckReport gradient_check(const SemanticHead &head, const Matrix &z, std::span<const std::uint8_t> labels,
                               double step, double tolerance);

/// JSON header line (dims, activation, seed, parameter count) followed by the
/// parameters as little-endian float64, layer by layer: weight (out x in, row-major), then bias.
void save_head(const SemanticHead &head, const std::filesystem::path &path);
SemanticHead load_head(const std::filesystem::path &path);

}  // namespace semmask
