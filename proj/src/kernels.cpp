#include "semmask/kernels.hpp"

#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "semmask/pointcloud_io.hpp"
#include "semmask/voxelizer.hpp"

namespace semmask::kernels {

namespace {

std::optional<VoxelIndex> key_of(const Point &pt, const VoxelGridConfig &cfg) {
  const Vec3 &p = pt.position;
  std::int32_t idx[3];
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(p[a] >= cfg.range_min[a] && p[a] < cfg.range_max[a])) return std::nullopt;
    idx[a] = static_cast<std::int32_t>(std::floor((p[a] - cfg.range_min[a]) / cfg.voxel_size[a]));
  }
  return VoxelIndex{idx[0], idx[1], idx[2]};
}

double point_distance(const Vec3 &a, const Vec3 &b, ChamferVariant variant) {
  const double d2 = squared_norm(a - b);
  return variant == ChamferVariant::Squared ? d2 : std::sqrt(d2);
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::vector<std::optional<VoxelIndex>> voxel_keys(std::span<const Point> points, const VoxelGridConfig &config,
                                                  Exec exec) {
  std::vector<std::optional<VoxelIndex>> keys(points.size());
  const auto n = static_cast<std::int64_t>(points.size());
  if (exec == Exec::Serial) {
    for (std::int64_t i = 0; i < n; ++i) keys[i] = key_of(points[i], config);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) keys[i] = key_of(points[i], config);
  }
  return keys;
}

double chamfer_directional(std::span<const Vec3> a, std::span<const Vec3> b, ChamferVariant variant) {
  double sum = 0.0;
  for (const Vec3 &pa : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3 &pb : b) best = std::min(best, point_distance(pa, pb, variant));
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}

std::vector<double> chamfer_batch(std::span<const PointSetPair> pairs, ChamferVariant variant, Exec exec) {
  std::vector<double> out(pairs.size());
  auto one = [&](std::size_t i) {
    const auto &pr = pairs[i];
    out[i] = (pr.a.empty() || pr.b.empty()) ? std::numeric_limits<double>::quiet_NaN()
                                            : chamfer_directional(pr.a, pr.b, variant);
  };
  const auto n = static_cast<std::int64_t>(pairs.size());
  if (exec == Exec::Serial) {
    for (std::int64_t i = 0; i < n; ++i) one(static_cast<std::size_t>(i));
  } else {
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t i = 0; i < n; ++i) one(static_cast<std::size_t>(i));
  }
  return out;
}

void dense_forward(std::span<const double> weight, std::span<const double> bias, std::span<const double> in,
                   std::span<double> out, std::size_t rows, std::size_t in_dim, std::size_t out_dim, Exec exec) {
  auto row = [&](std::size_t r) {
    const double *x = in.data() + r * in_dim;
    double *y = out.data() + r * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double *w = weight.data() + o * in_dim;
      double acc = bias[o];
      for (std::size_t i = 0; i < in_dim; ++i) acc += w[i] * x[i];
      y[o] = acc;
    }
  };
  const auto n = static_cast<std::int64_t>(rows);
  if (exec == Exec::Serial || rows < 2) {
    for (std::int64_t r = 0; r < n; ++r) row(static_cast<std::size_t>(r));
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < n; ++r) row(static_cast<std::size_t>(r));
  }
}

void dense_backward_params(std::span<const double> grad_out, std::span<const double> in,
                           std::span<double> grad_weight, std::span<double> grad_bias, std::size_t rows,
                           std::size_t in_dim, std::size_t out_dim, Exec exec) {
  // Each output unit owns its row of dW and its db entry; rows are summed in order.
  auto unit = [&](std::size_t o) {
    double *gw = grad_weight.data() + o * in_dim;
    double gb = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = grad_out[r * out_dim + o];
      if (g == 0.0) continue;
      const double *x = in.data() + r * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) gw[i] += g * x[i];
      gb += g;
    }
    grad_bias[o] += gb;
  };
  const auto n = static_cast<std::int64_t>(out_dim);
  if (exec == Exec::Serial) {
    for (std::int64_t o = 0; o < n; ++o) unit(static_cast<std::size_t>(o));
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < n; ++o) unit(static_cast<std::size_t>(o));
  }
}

void dense_backward_input(std::span<const double> grad_out, std::span<const double> weight,
                          std::span<double> grad_in, std::size_t rows, std::size_t in_dim, std::size_t out_dim,
                          Exec exec) {
  auto row = [&](std::size_t r) {
    const double *g = grad_out.data() + r * out_dim;
    double *gi = grad_in.data() + r * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) gi[i] = 0.0;
    for (std::size_t o = 0; o < out_dim; ++o) {
      if (g[o] == 0.0) continue;
      const double *w = weight.data() + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) gi[i] += g[o] * w[i];
    }
  };
  const auto n = static_cast<std::int64_t>(rows);
  if (exec == Exec::Serial || rows < 2) {
    for (std::int64_t r = 0; r < n; ++r) row(static_cast<std::size_t>(r));
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < n; ++r) row(static_cast<std::size_t>(r));
  }
}

}  // namespace semmask::kernels
