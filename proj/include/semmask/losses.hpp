#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "json.hpp"
#include "semmask/common.hpp"
#include "semmask/kernels.hpp"
#include "semmask/nn.hpp"
#include "semmask/recon_metrics.hpp"

namespace semmask {

/// Pretraining loss terms of one step.
struct LossBreakdown {
  double l_img = 0.0;
  double l_c = 0.0;
  double l_occ = 0.0;
  double l_sem = 0.0;
  double lambda_sem = 0.0;
  double l_base = 0.0;   // l_img + l_c + l_occ, summed in that order
  double l_total = 0.0;  // l_base + lambda_sem * l_sem

  nlohmann::json to_json() const;
};

/// Composes the terms. Components and lambda must be non-negative.
LossBreakdown total_loss(double l_img, double l_c, double l_occ, double l_sem, double lambda_sem);

struct LossWithGrad {
  double loss = 0.0;
  Matrix grad;  // same shape as the differentiated input
};

/// Mean cross-entropy over rows: (1/n) sum_r [logsumexp(logits_r) - logits_r[label_r]].
/// Gradient w.r.t. logits is (softmax - onehot)/n. An empty batch yields loss 0 and
/// an empty gradient.
LossWithGrad semantic_loss(const Matrix &logits, std::span<const std::uint8_t> labels);

/// Mean binary cross-entropy with logits; gradient (sigmoid(x) - y)/n as a column.
LossWithGrad occupancy_loss(std::span<const double> logits, std::span<const std::uint8_t> truth);
/// Keyed form: both maps must cover the same voxels.
double occupancy_loss(const std::map<VoxelIndex, double> &logits, const OccupancyMap &truth);

/// An image cut into equally sized patches, one patch per row.
struct PatchImage {
  Matrix patches;  // num_patches x patch_pixels
};

/// Mean squared error over the pixels of masked patches (or of all patches).
/// Gradient w.r.t. predicted patches is returned alongside.
LossWithGrad image_mse(const PatchImage &predicted, const PatchImage &truth, std::span<const std::uint8_t> patch_mask,
                       bool masked_only = true);

/// Chamfer loss CD(gt->pred) + CD(pred->gt) and its gradient w.r.t. each predicted
/// point, with nearest-neighbour assignments held fixed. Coincident points get a
/// zero subgradient in the Euclidean variant.
struct ChamferLoss {
  double loss = 0.0;
  std::vector<Vec3> grad;
};
ChamferLoss chamfer_loss(std::span<const Vec3> gt, std::span<const Vec3> pred,
                         ChamferVariant variant = ChamferVariant::Euclidean);

}  // namespace semmask
