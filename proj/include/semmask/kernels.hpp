#pragma once

// Data-parallel inner loops. Every kernel has a serial reference path and an
// OpenMP path selected by Exec. Each parallel iteration writes its own output
// slot and keeps the serial summation order, so both paths agree bit-for-bit.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "semmask/common.hpp"

namespace semmask {

struct Point;
struct VoxelGridConfig;

namespace kernels {

/// floor((p - range_min) / voxel_size) for in-range points, nullopt otherwise.
std::vector<std::optional<VoxelIndex>> voxel_keys(std::span<const Point> points, const VoxelGridConfig &config,
                                                  Exec exec);

enum class ChamferVariant { Euclidean, Squared };

/// (1/|A|) sum_a min_b d(a, b), d Euclidean or squared Euclidean.
/// Exhaustive nearest-neighbour search; sets at this scale hold a handful of points.
double chamfer_directional(std::span<const Vec3> a, std::span<const Vec3> b, ChamferVariant variant);

struct PointSetPair {
  std::span<const Vec3> a;
  std::span<const Vec3> b;
};

/// chamfer_directional for each pair; empty sides yield NaN.
std::vector<double> chamfer_batch(std::span<const PointSetPair> pairs, ChamferVariant variant, Exec exec);

/// Row-major dense layer: out[r, o] = bias[o] + sum_i in[r, i] * weight[o, i].
void dense_forward(std::span<const double> weight, std::span<const double> bias, std::span<const double> in,
                   std::span<double> out, std::size_t rows, std::size_t in_dim, std::size_t out_dim, Exec exec);

/// Accumulates dW[o, i] += sum_r grad_out[r, o] * in[r, i] and db[o] += sum_r grad_out[r, o].
void dense_backward_params(std::span<const double> grad_out, std::span<const double> in,
                           std::span<double> grad_weight, std::span<double> grad_bias, std::size_t rows,
                           std::size_t in_dim, std::size_t out_dim, Exec exec);

/// grad_in[r, i] = sum_o grad_out[r, o] * weight[o, i].
void dense_backward_input(std::span<const double> grad_out, std::span<const double> weight,
                          std::span<double> grad_in, std::size_t rows, std::size_t in_dim, std::size_t out_dim,
                          Exec exec);

int max_threads();

}  // namespace kernels
}  // namespace semmask
