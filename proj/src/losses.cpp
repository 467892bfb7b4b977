#include "semmask/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace semmask {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t nearest(const Vec3 &p, std::span<const Vec3> set, double &dist2) {
  std::size_t best = 0;
  dist2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double d = squared_norm(p - set[i]);
    if (d < dist2) {
      dist2 = d;
      best = i;
    }
  }
  return best;
}

}  // namespace

nlohmann::json LossBreakdown::to_json() const {
  return {{"l_img", l_img},   {"l_c", l_c},       {"l_occ", l_occ},    {"l_sem", l_sem},
          {"lambda_sem", lambda_sem}, {"l_base", l_base}, {"l_total", l_total}};
}

LossBreakdown total_loss(double l_img, double l_c, double l_occ, double l_sem, double lambda_sem) {
  if (!(l_img >= 0.0 && l_c >= 0.0 && l_occ >= 0.0 && l_sem >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "loss components must be non-negative");
  }
  if (!(lambda_sem >= 0.0)) throw Error(ErrorCode::InvalidArgument, "lambda_sem must be non-negative");
  LossBreakdown b;
  b.l_img = l_img;
  b.l_c = l_c;
  b.l_occ = l_occ;
  b.l_sem = l_sem;
  b.lambda_sem = lambda_sem;
  b.l_base = l_img + l_c + l_occ;
  b.l_total = b.l_base + lambda_sem * l_sem;
  return b;
}

LossWithGrad semantic_loss(const Matrix &logits, std::span<const std::uint8_t> labels) {
  if (labels.size() != logits.rows) {
    throw Error(ErrorCode::DimensionMismatch, "one label per logit row required");
  }
  LossWithGrad out;
  if (logits.rows == 0) return out;
  const std::size_t k = logits.cols;
  const double inv_n = 1.0 / static_cast<double>(logits.rows);
  out.grad = Matrix(logits.rows, k);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    if (labels[r] >= k) {
      throw Error(ErrorCode::LabelOutOfRange,
                  "label " + std::to_string(labels[r]) + " for " + std::to_string(k) + " classes");
    }
    const auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[labels[r]];
    auto g = out.grad.row(r);
    for (std::size_t c = 0; c < k; ++c) g[c] = std::exp(row[c] - lse) * inv_n;
    g[labels[r]] -= inv_n;
  }
  out.loss = total * inv_n;
  return out;
}

LossWithGrad occupancy_loss(std::span<const double> logits, std::span<const std::uint8_t> truth) {
  if (logits.size() != truth.size()) throw Error(ErrorCode::DomainMismatch, "occupancy logits and truth differ in size");
  LossWithGrad out;
  out.grad = Matrix(logits.size(), 1);
  if (logits.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double y = truth[i] ? 1.0 : 0.0;
    // -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    total += softplus(x) - y * x;
    out.grad.data[i] = (sigmoid(x) - y) * inv_n;
  }
  out.loss = total * inv_n;
  return out;
}

double occupancy_loss(const std::map<VoxelIndex, double> &logits, const OccupancyMap &truth) {
  if (logits.size() != truth.size()) throw Error(ErrorCode::DomainMismatch, "occupancy domains differ");
  std::vector<double> x;
  std::vector<std::uint8_t> y;
  auto it = truth.begin();
  for (const auto &[idx, logit] : logits) {
    if (it->first != idx) throw Error(ErrorCode::DomainMismatch, "voxel " + to_string(idx) + " missing from truth");
    x.push_back(logit);
    y.push_back(it->second ? 1 : 0);
    ++it;
  }
  return occupancy_loss(x, y).loss;
}

LossWithGrad image_mse(const PatchImage &predicted, const PatchImage &truth, std::span<const std::uint8_t> patch_mask,
                       bool masked_only) {
  const auto &p = predicted.patches;
  const auto &t = truth.patches;
  if (p.rows != t.rows || p.cols != t.cols) throw Error(ErrorCode::ShapeMismatch, "image shapes differ");
  if (masked_only && patch_mask.size() != p.rows) throw Error(ErrorCode::ShapeMismatch, "one mask flag per patch");
  LossWithGrad out;
  out.grad = Matrix(p.rows, p.cols);
  std::size_t count = 0;
  for (std::size_t r = 0; r < p.rows; ++r) {
    if (!masked_only || patch_mask[r]) count += p.cols;
  }
  if (count == 0) return out;
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows; ++r) {
    if (masked_only && !patch_mask[r]) continue;
    for (std::size_t c = 0; c < p.cols; ++c) {
      const double d = p(r, c) - t(r, c);
      total += d * d;
      out.grad(r, c) = 2.0 * d * inv;
    }
  }
  out.loss = total * inv;
  return out;
}

ChamferLoss chamfer_loss(std::span<const Vec3> gt, std::span<const Vec3> pred, ChamferVariant variant) {
  if (gt.empty() || pred.empty()) throw Error(ErrorCode::EmptySet, "chamfer loss of an empty point set");
  ChamferLoss out;
  out.grad.assign(pred.size(), Vec3{});
  const bool squared = variant == ChamferVariant::Squared;

  // d/db of d(a, b) for the pair (a, b); b is the predicted point.
  auto pair_grad = [&](const Vec3 &a, const Vec3 &b, double d2, double scale) -> Vec3 {
    const Vec3 diff = b - a;
    if (squared) return diff * (2.0 * scale);
    const double d = std::sqrt(d2);
    return d > 0.0 ? diff * (scale / d) : Vec3{};
  };

  double fwd = 0.0;
  const double inv_gt = 1.0 / static_cast<double>(gt.size());
  for (const auto &a : gt) {
    double d2 = 0.0;
    const std::size_t j = nearest(a, pred, d2);
    fwd += squared ? d2 : std::sqrt(d2);
    out.grad[j] = out.grad[j] + pair_grad(a, pred[j], d2, inv_gt);
  }
  double bwd = 0.0;
  const double inv_pred = 1.0 / static_cast<double>(pred.size());
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double d2 = 0.0;
    const std::size_t i = nearest(pred[j], gt, d2);
    bwd += squared ? d2 : std::sqrt(d2);
    out.grad[j] = out.grad[j] + pair_grad(gt[i], pred[j], d2, inv_pred);
  }
  out.loss = fwd * inv_gt + bwd * inv_pred;
  return out;
}

}  // namespace semmask
