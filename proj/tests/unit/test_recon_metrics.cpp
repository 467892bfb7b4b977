#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "semmask/recon_metrics.hpp"
#include "semmask/rng.hpp"
#include "test_support.hpp"

using namespace semmask;
using namespace semmask::testing;

namespace {

double oracle(const std::vector<Vec3> &a, const std::vector<Vec3> &b) {
  double sum = 0.0;
  for (const auto &p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto &q : b) {
      const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}

std::vector<Vec3> random_points(Rng &rng, std::size_t n) {
  std::vector<Vec3> pts(n);
  for (auto &p : pts) p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
  return pts;
}

ReconMetrics metrics(double a, double b, double occ = 1.0) {
  ReconMetrics m;
  m.chamfer_gt_to_pred = a;
  m.chamfer_pred_to_gt = b;
  m.occupancy_accuracy = occ;
  return m;
}

std::map<ClassId, ReconMetrics> table_metrics() {
  std::ifstream in(std::string(SEMMASK_SOURCE_DIR) + "/data/reference_class_metrics.csv");
  return read_metrics_csv(in);
}

}  // namespace

TEST_CASE("chamfer identity, 3-4-5 and empty sets") {
  Rng rng(1);
  const auto a = random_points(rng, 6);
  CHECK(semmask::chamfer_directional(a, a) == 0.0);
  const std::vector<Vec3> o{{0, 0, 0}}, p{{3, 4, 0}};
  CHECK(semmask::chamfer_directional(o, p) == 5.0);
  CHECK(semmask::chamfer_directional(o, p, ChamferVariant::Squared) == 25.0);
  CHECK_THROWS_AS(semmask::chamfer_directional({}, p), Error);
  CHECK_THROWS_AS(semmask::chamfer_directional(o, {}), Error);
}

TEST_CASE("chamfer is not symmetric") {
  const std::vector<Vec3> a{{0, 0, 0}, {1, 0, 0}};
  const std::vector<Vec3> b{{0, 0, 0}, {1, 0, 0}, {10, 0, 0}};
  CHECK(semmask::chamfer_directional(a, b) == 0.0);
  CHECK(semmask::chamfer_directional(b, a) == doctest::Approx(3.0));
}

TEST_CASE("chamfer matches the double-loop oracle and is translation invariant") {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto a = random_points(rng, 1 + rng.below(8));
    const auto b = random_points(rng, 1 + rng.below(8));
    CHECK(std::abs(semmask::chamfer_directional(a, b) - oracle(a, b)) < 1e-12);
    const Vec3 shift{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    auto as = a, bs = b;
    for (auto &x : as) x = x + shift;
    for (auto &x : bs) x = x + shift;
    CHECK(semmask::chamfer_directional(as, bs) == doctest::Approx(semmask::chamfer_directional(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("occupancy accuracy") {
  std::vector<VoxelIndex> domain;
  OccupancyMap truth, same, flipped, six;
  for (int i = 0; i < 8; ++i) {
    domain.push_back({i, 0, 0});
    truth[{i, 0, 0}] = i % 2 == 0;
    same[{i, 0, 0}] = i % 2 == 0;
    flipped[{i, 0, 0}] = i % 2 != 0;
    six[{i, 0, 0}] = i < 6 ? i % 2 == 0 : i % 2 != 0;
  }
  CHECK(occupancy_accuracy(same, truth, domain) == 1.0);
  CHECK(occupancy_accuracy(flipped, truth, domain) == 0.0);
  CHECK(occupancy_accuracy(six, truth, domain) == 0.75);
  CHECK_THROWS_AS(occupancy_accuracy(same, truth, {}), Error);
}

TEST_CASE("fractional ranks share ties") {
  const std::vector<double> v{0.3, 0.1, 0.3, 0.2};
  CHECK(fractional_ranks(v) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
  CHECK(fractional_ranks(std::vector<double>{}).empty());
}

TEST_CASE("table metrics reproduce the printed mean ranks, levels and weights") {
  const auto report = rank_importance(table_metrics());
  const std::vector<double> expected{7.5, 7.5, 7.5, 5.0, 5.5, 6.0, 6.5, 6.5, 1.0, 2.0};
  const std::vector<Level> levels{Level::High,   Level::High,   Level::High,   Level::Medium, Level::Medium,
                                  Level::Medium, Level::Medium, Level::Medium, Level::Low,    Level::Low};
  const std::vector<double> weights{0.75, 0.75, 0.75, 0.95, 0.95, 0.95, 0.95, 0.95, 1.05, 1.05};
  REQUIRE(report.rows.size() == 10);
  for (ClassId c = 0; c < 10; ++c) {
    CHECK(report.row(c).mean_rank == expected[c]);
    CHECK(report.row(c).level == levels[c]);
    CHECK(report.row(c).weight == weights[c]);
  }
  CHECK(report.background_weight == 1.2);
  CHECK(report.levels() == default_levels());
}

TEST_CASE("ranks depend only on order") {
  auto m = table_metrics();
  const auto base = rank_importance(m);
  for (auto &[c, x] : m) {
    x.chamfer_gt_to_pred = std::exp(10 * x.chamfer_gt_to_pred);
    x.chamfer_pred_to_gt = x.chamfer_pred_to_gt * x.chamfer_pred_to_gt * x.chamfer_pred_to_gt + 4;
  }
  const auto moved = rank_importance(m);
  for (ClassId c = 0; c < 10; ++c) CHECK(moved.row(c).mean_rank == base.row(c).mean_rank);
}

TEST_CASE("hand-ordered three-class ranking") {
  // gt->pred: b < c < a ; pred->gt: c < a < b.
  std::map<ClassId, ReconMetrics> m{{0, metrics(0.9, 0.5)}, {1, metrics(0.1, 0.7)}, {2, metrics(0.5, 0.2)}};
  const auto r = rank_importance(m);
  CHECK(r.row(0).rank_gt_to_pred == 3);
  CHECK(r.row(0).rank_pred_to_gt == 2);
  CHECK(r.row(0).mean_rank == 2.5);
  CHECK(r.row(1).mean_rank == 2.0);
  CHECK(r.row(2).mean_rank == 1.5);
  CHECK(r.row(0).level == Level::Low);  // the thresholds are tuned for 10 classes
}

TEST_CASE("identical metrics tie at the middle rank") {
  std::map<ClassId, ReconMetrics> m;
  for (ClassId c = 0; c < 10; ++c) m[c] = metrics(0.2, 0.4);
  for (const auto &row : rank_importance(m).rows) CHECK(row.mean_rank == 5.5);
}

TEST_CASE("occupancy as a third rank column") {
  std::map<ClassId, ReconMetrics> m{{0, metrics(0.1, 0.1, 0.5)}, {1, metrics(0.2, 0.2, 0.9)}};
  RankingConfig cfg;
  cfg.include_occupancy = true;
  const auto r = rank_importance(m, cfg);
  // Lower accuracy means more degradation, so class 0 takes rank 2 there.
  CHECK(r.row(0).rank_occupancy == 2.0);
  CHECK(r.row(0).mean_rank == doctest::Approx(4.0 / 3.0));
  CHECK(r.row(1).mean_rank == doctest::Approx(5.0 / 3.0));
}

TEST_CASE("ranking errors") {
  std::map<ClassId, ReconMetrics> m{{0, metrics(0.1, 0.1)}};
  const std::vector<ClassId> want{0, 1};
  CHECK_THROWS_AS(rank_importance(m, {}, want), Error);
  CHECK_THROWS_AS(rank_importance({}), Error);
  m[1] = metrics(std::nan(""), 0.1);
  CHECK_THROWS_AS(rank_importance(m), Error);
  const auto r = rank_importance({{0, metrics(0.1, 0.1)}});
  CHECK_THROWS_AS(r.row(5), Error);
}

TEST_CASE("report csv round trip") {
  const auto report = rank_importance(table_metrics());
  std::ostringstream out;
  report.write_csv(out);
  const std::string text = out.str();
  CHECK(text.rfind("class,chamfer_gt_to_pred,chamfer_pred_to_gt,occupancy_accuracy,mean_rank,level,weight\n", 0) == 0);
  std::istringstream in(text);
  const auto back = ImportanceReport::read_csv(in);
  REQUIRE(back.rows.size() == 10);
  for (ClassId c = 0; c < 10; ++c) {
    CHECK(back.row(c).mean_rank == report.row(c).mean_rank);
    CHECK(back.row(c).level == report.row(c).level);
    CHECK(back.row(c).weight == report.row(c).weight);
  }
  CHECK(back.background_weight == 1.2);
  std::istringstream bad("class,foo\n");
  CHECK_THROWS_AS(ImportanceReport::read_csv(bad), Error);
}

TEST_CASE("evaluate_reconstruction: perfect, empty and hand-computed cases") {
  // Four voxels, one point each.
  const auto grid = grid_from_voxels(row_of_voxels({{0}, {0}, {kBackground}, {kBackground}}));
  const auto assignment = mask_uniform(grid, 1.0, 0);

  Reconstruction perfect;
  for (const auto &v : grid.voxels()) {
    perfect.points[v.index] = {grid.source().points[v.point_ids[0]].position};
    perfect.occupancy[v.index] = true;
  }
  const auto pm = evaluate_reconstruction(grid, perfect, assignment);
  CHECK(pm.chamfer_gt_to_pred == 0.0);
  CHECK(pm.chamfer_pred_to_gt == 0.0);
  CHECK(pm.occupancy_accuracy == 1.0);
  CHECK(pm.evaluated_voxels == 4);

  // Displace one predicted point by 0.2 and add a second one 0.4 away.
  Reconstruction shifted = perfect;
  const Vec3 p = grid.source().points[grid.voxels()[1].point_ids[0]].position;
  shifted.points[grid.voxels()[1].index] = {p + Vec3{0.2, 0, 0}, p + Vec3{0, 0.4, 0}};
  for (auto exec : {Exec::Serial, Exec::Parallel}) {
    const auto sm = evaluate_reconstruction(grid, shifted, assignment, {ChamferVariant::Euclidean,
                                                                        ChamferAggregation::PerVoxel, exec});
    // gt->pred: voxel 1 contributes 0.2, others 0.  pred->gt: voxel 1 contributes (0.2 + 0.4) / 2.
    CHECK(sm.chamfer_gt_to_pred == doctest::Approx(0.2 / 4));
    CHECK(sm.chamfer_pred_to_gt == doctest::Approx(0.3 / 4));
  }

  // Everything predicted empty, plus two predicted-empty neighbours that are truly empty.
  Reconstruction empty;
  for (const auto &v : grid.voxels()) empty.occupancy[v.index] = false;
  empty.occupancy[{0, 1, 0}] = false;
  empty.occupancy[{1, 1, 0}] = false;
  const auto em = evaluate_reconstruction(grid, empty, assignment);
  CHECK(std::isnan(em.chamfer_gt_to_pred));
  CHECK(em.unreconstructed_voxels == 4);
  CHECK(em.evaluated_voxels == 0);
  CHECK(em.occupancy_accuracy == doctest::Approx(2.0 / 6.0));

  Reconstruction partial = perfect;
  partial.occupancy.erase(grid.voxels()[0].index);
  CHECK_THROWS_AS(evaluate_reconstruction(grid, partial, assignment), Error);
}

TEST_CASE("global aggregation pools the masked points") {
  const auto grid = grid_from_voxels(row_of_voxels({{0}, {0}}));
  const auto assignment = mask_uniform(grid, 1.0, 0);
  Reconstruction r;
  std::vector<Vec3> all_gt, all_pred;
  for (const auto &v : grid.voxels()) {
    const Vec3 p = grid.source().points[v.point_ids[0]].position;
    r.points[v.index] = {p + Vec3{0.1, 0, 0}};
    r.occupancy[v.index] = true;
    all_gt.push_back(p);
    all_pred.push_back(p + Vec3{0.1, 0, 0});
  }
  const auto m = evaluate_reconstruction(grid, r, assignment, {ChamferVariant::Euclidean, ChamferAggregation::Global});
  CHECK(m.chamfer_gt_to_pred == doctest::Approx(oracle(all_gt, all_pred)));
  CHECK(m.chamfer_pred_to_gt == doctest::Approx(oracle(all_pred, all_gt)));
}

TEST_CASE("metrics csv reader") {
  std::istringstream in("class,chamfer_gt_to_pred,chamfer_pred_to_gt\ncar,0.1,0.2\n");
  const auto m = read_metrics_csv(in);
  REQUIRE(m.size() == 1);
  CHECK(m.at(0).chamfer_pred_to_gt == 0.2);
  std::istringstream bad("class,occupancy_accuracy\ncar,0.1\n");
  CHECK_THROWS_AS(read_metrics_csv(bad), Error);
  CHECK(table_metrics().at(8).occupancy_accuracy == 0.976840);
}
