#include <cmath>
#include <cstring>

#include "doctest.h"
#include "semmask/kernels.hpp"
#include "semmask/pointcloud_io.hpp"
#include "semmask/rng.hpp"
#include "semmask/voxelizer.hpp"

using namespace semmask;

namespace {

std::vector<double> random_vec(Rng &rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto &x : v) x = rng.uniform(-1, 1);
  return v;
}

bool bit_equal(const std::vector<double> &a, const std::vector<double> &b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("voxel keys agree between serial and parallel paths") {
  Rng rng(4);
  std::vector<Point> pts(20000);
  for (auto &p : pts) p.position = {rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-6, 4)};
  const VoxelGridConfig cfg;
  const auto a = kernels::voxel_keys(pts, cfg, Exec::Serial);
  const auto b = kernels::voxel_keys(pts, cfg, Exec::Parallel);
  CHECK(a == b);
  std::size_t in = 0;
  for (const auto &k : a) in += k.has_value();
  CHECK(in > 0);
  CHECK(in < pts.size());
}

TEST_CASE("chamfer batch agrees bit-for-bit and flags empty sides") {
  Rng rng(5);
  std::vector<std::vector<Vec3>> sets(401);
  for (auto &s : sets) {
    s.resize(rng.below(9));
    for (auto &p : s) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  }
  std::vector<kernels::PointSetPair> pairs;
  for (std::size_t i = 0; i + 1 < sets.size(); ++i) pairs.push_back({sets[i], sets[i + 1]});
  for (auto variant : {kernels::ChamferVariant::Euclidean, kernels::ChamferVariant::Squared}) {
    const auto s = kernels::chamfer_batch(pairs, variant, Exec::Serial);
    const auto p = kernels::chamfer_batch(pairs, variant, Exec::Parallel);
    CHECK(bit_equal(s, p));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].a.empty() || pairs[i].b.empty()) {
        CHECK(std::isnan(s[i]));
      } else {
        CHECK(s[i] == kernels::chamfer_directional(pairs[i].a, pairs[i].b, variant));
      }
    }
  }
}

TEST_CASE("dense kernels agree bit-for-bit and match a naive product") {
  Rng rng(6);
  const std::size_t rows = 37, in_dim = 13, out_dim = 9;
  const auto w = random_vec(rng, in_dim * out_dim);
  const auto b = random_vec(rng, out_dim);
  const auto x = random_vec(rng, rows * in_dim);
  const auto g = random_vec(rng, rows * out_dim);

  std::vector<double> ys(rows * out_dim), yp(rows * out_dim);
  kernels::dense_forward(w, b, x, ys, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_forward(w, b, x, yp, rows, in_dim, out_dim, Exec::Parallel);
  CHECK(bit_equal(ys, yp));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in_dim; ++i) acc += w[o * in_dim + i] * x[r * in_dim + i];
      CHECK(ys[r * out_dim + o] == doctest::Approx(acc).epsilon(1e-14));
    }
  }

  std::vector<double> gws(w.size(), 0.5), gwp(w.size(), 0.5), gbs(out_dim, 0.5), gbp(out_dim, 0.5);
  kernels::dense_backward_params(g, x, gws, gbs, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_backward_params(g, x, gwp, gbp, rows, in_dim, out_dim, Exec::Parallel);
  CHECK(bit_equal(gws, gwp));
  CHECK(bit_equal(gbs, gbp));
  for (std::size_t o = 0; o < out_dim; ++o) {
    double db = 0.0;
    for (std::size_t r = 0; r < rows; ++r) db += g[r * out_dim + o];
    CHECK(gbs[o] == doctest::Approx(0.5 + db).epsilon(1e-14));
    for (std::size_t i = 0; i < in_dim; ++i) {
      double dw = 0.0;
      for (std::size_t r = 0; r < rows; ++r) dw += g[r * out_dim + o] * x[r * in_dim + i];
      CHECK(gws[o * in_dim + i] == doctest::Approx(0.5 + dw).epsilon(1e-14));
    }
  }

  std::vector<double> gis(rows * in_dim), gip(rows * in_dim);
  kernels::dense_backward_input(g, w, gis, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_backward_input(g, w, gip, rows, in_dim, out_dim, Exec::Parallel);
  CHECK(bit_equal(gis, gip));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < in_dim; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out_dim; ++o) acc += g[r * out_dim + o] * w[o * in_dim + i];
      CHECK(gis[r * in_dim + i] == doctest::Approx(acc).epsilon(1e-14));
    }
  }
}

TEST_CASE("thread count is positive") { CHECK(kernels::max_threads() >= 1); }
