// Serial reference against the OpenMP path for each kernel.
// Usage: bench_kernels [repeats]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <vector>

#include "semmask/kernels.hpp"
#include "semmask/pointcloud_io.hpp"
#include "semmask/rng.hpp"
#include "semmask/voxelizer.hpp"

using namespace semmask;

namespace {

double best_of(int repeats, const std::function<void()> &fn) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void row(const char *name, int repeats, const std::function<void(Exec)> &fn, bool agree) {
  const double s = best_of(repeats, [&] { fn(Exec::Serial); });
  const double p = best_of(repeats, [&] { fn(Exec::Parallel); });
  std::printf("%-28s %10.3f %10.3f %8.2fx  %s\n", name, s, p, s / p, agree ? "identical" : "MISMATCH");
}

bool same(const std::vector<double> &a, const std::vector<double> &b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

int main(int argc, char **argv) {
  const int repeats = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  Rng rng(1);
  std::printf("threads %d, best of %d\n", kernels::max_threads(), repeats);
  std::printf("%-28s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  std::vector<Point> pts(2'000'000);
  for (auto &p : pts) p.position = {rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-6, 4)};
  const VoxelGridConfig cfg;
  row("voxel_keys 2M points", repeats, [&](Exec e) { (void)kernels::voxel_keys(pts, cfg, e); },
      kernels::voxel_keys(pts, cfg, Exec::Serial) == kernels::voxel_keys(pts, cfg, Exec::Parallel));

  std::vector<std::vector<Vec3>> sets(40'001);
  for (auto &s : sets) {
    s.resize(1 + rng.below(8));
    for (auto &p : s) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  }
  std::vector<kernels::PointSetPair> pairs;
  for (std::size_t i = 0; i + 1 < sets.size(); ++i) pairs.push_back({sets[i], sets[i + 1]});
  const auto variant = kernels::ChamferVariant::Euclidean;
  row("chamfer_batch 40k pairs", repeats, [&](Exec e) { (void)kernels::chamfer_batch(pairs, variant, e); },
      same(kernels::chamfer_batch(pairs, variant, Exec::Serial), kernels::chamfer_batch(pairs, variant, Exec::Parallel)));

  const std::size_t rows = 20'000, in_dim = 131, out_dim = 64;
  std::vector<double> w(in_dim * out_dim), b(out_dim), x(rows * in_dim), g(rows * out_dim);
  for (auto *v : {&w, &b, &x, &g}) {
    for (auto &e : *v) e = rng.uniform(-1, 1);
  }
  std::vector<double> ys(rows * out_dim), yp(rows * out_dim);
  kernels::dense_forward(w, b, x, ys, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_forward(w, b, x, yp, rows, in_dim, out_dim, Exec::Parallel);
  std::vector<double> y(rows * out_dim);
  row("dense_forward 20k x 131->64", repeats,
      [&](Exec e) { kernels::dense_forward(w, b, x, y, rows, in_dim, out_dim, e); }, same(ys, yp));

  std::vector<double> gws(w.size()), gwp(w.size()), gbs(out_dim), gbp(out_dim);
  kernels::dense_backward_params(g, x, gws, gbs, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_backward_params(g, x, gwp, gbp, rows, in_dim, out_dim, Exec::Parallel);
  std::vector<double> gw(w.size()), gb(out_dim);
  row("dense_backward_params", repeats,
      [&](Exec e) { kernels::dense_backward_params(g, x, gw, gb, rows, in_dim, out_dim, e); },
      same(gws, gwp) && same(gbs, gbp));

  std::vector<double> gis(rows * in_dim), gip(rows * in_dim);
  kernels::dense_backward_input(g, w, gis, rows, in_dim, out_dim, Exec::Serial);
  kernels::dense_backward_input(g, w, gip, rows, in_dim, out_dim, Exec::Parallel);
  std::vector<double> gi(rows * in_dim);
  row("dense_backward_input", repeats,
      [&](Exec e) { kernels::dense_backward_input(g, w, gi, rows, in_dim, out_dim, e); }, same(gis, gip));
  return 0;
}
