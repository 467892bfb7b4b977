#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "semmask/losses.hpp"
#include "semmask/rng.hpp"
#include "semmask/semantic_head.hpp"
#include "test_support.hpp"

using namespace semmask;
using namespace semmask::testing;

namespace {

Matrix random_matrix(Rng &rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto &x : m.data) x = rng.uniform(-scale, scale);
  return m;
}

std::vector<std::uint8_t> random_labels(Rng &rng, std::size_t n, std::size_t k) {
  std::vector<std::uint8_t> out(n);
  for (auto &l : out) l = static_cast<std::uint8_t>(rng.below(k));
  return out;
}

// Independent forward pass: tanh after every hidden layer, written with plain loops.
std::vector<double> oracle_forward(const Mlp &mlp, std::vector<double> x) {
  const auto &layers = mlp.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto &L = layers[l];
    std::vector<double> y(L.out_dim);
    for (std::size_t o = 0; o < L.out_dim; ++o) {
      double acc = L.bias[o];
      for (std::size_t i = 0; i < L.in_dim; ++i) acc += L.weight[o * L.in_dim + i] * x[i];
      y[o] = l + 1 < layers.size() ? std::tanh(acc) : acc;
    }
    x = std::move(y);
  }
  return x;
}

double oracle_ce(const std::vector<double> &logits, std::size_t label) {
  double s = 0.0;
  for (double v : logits) s += std::exp(v);
  return std::log(s) - logits[label];
}

SemanticHeadConfig small_head(std::uint64_t seed) {
  SemanticHeadConfig c;
  c.feature_dim = 5;
  c.hidden = {6, 4};
  c.num_classes = 4;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("total loss composition") {
  const auto b = total_loss(0.5, 0.25, 0.25, 4.0, 0.25);
  CHECK(b.l_base == 1.0);
  CHECK(b.l_total == 2.0);
  const auto z = total_loss(0.1, 0.2, 0.3, 7.0, 0.0);
  CHECK(z.l_total == z.l_base);
  CHECK(z.l_base == 0.1 + 0.2 + 0.3);
  CHECK(total_loss(0, 0, 0, 0, 0.25).l_total == 0.0);
  CHECK_THROWS_AS(total_loss(-1, 0, 0, 0, 0), Error);
  CHECK_THROWS_AS(total_loss(0, 0, 0, 0, -0.1), Error);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(), c = rng.uniform(), o = rng.uniform(), s = rng.uniform();
    const auto t = total_loss(a, c, o, s, 0.25);
    CHECK(t.l_base == a + c + o);
    CHECK(t.l_total == t.l_base + 0.25 * s);
  }
}

TEST_CASE("semantic loss analytic values") {
  Matrix uniform(3, 11, 0.7);
  const auto u = semantic_loss(uniform, std::vector<std::uint8_t>{0, 5, 10});
  CHECK(u.loss == doctest::Approx(std::log(11.0)));
  Matrix sharp(1, 4, 0.0);
  sharp(0, 2) = 60.0;
  CHECK(semantic_loss(sharp, std::vector<std::uint8_t>{2}).loss < 1e-20);
  const auto empty = semantic_loss(Matrix(0, 4), {});
  CHECK(empty.loss == 0.0);
  CHECK(empty.grad.rows == 0);
  CHECK_THROWS_AS(semantic_loss(uniform, std::vector<std::uint8_t>{0, 11, 1}), Error);
  CHECK_THROWS_AS(semantic_loss(uniform, std::vector<std::uint8_t>{0}), Error);
}

TEST_CASE("semantic loss gradient: finite differences and zero row sums") {
  Rng rng(2);
  const auto logits = random_matrix(rng, 5, 4, 3.0);
  const auto labels = random_labels(rng, 5, 4);
  const auto res = semantic_loss(logits, labels);
  double ce = 0.0;
  for (std::size_t r = 0; r < 5; ++r) ce += oracle_ce({logits.row(r).begin(), logits.row(r).end()}, labels[r]);
  CHECK(res.loss == doctest::Approx(ce / 5).epsilon(1e-13));
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 4; ++c) sum += res.grad(r, c);
    CHECK(std::abs(sum) < 1e-12);
  }
  const double h = 1e-5;
  for (std::size_t k = 0; k < logits.data.size(); ++k) {
    auto up = logits, down = logits;
    up.data[k] += h;
    down.data[k] -= h;
    const double fd = (semantic_loss(up, labels).loss - semantic_loss(down, labels).loss) / (2 * h);
    const double rel = std::abs(fd - res.grad.data[k]) / std::max({std::abs(fd), std::abs(res.grad.data[k]), 1e-8});
    CHECK(rel < 1e-6);
  }
}

TEST_CASE("occupancy loss") {
  const std::vector<double> zeros(4, 0.0);
  const std::vector<std::uint8_t> truth{1, 0, 1, 0};
  CHECK(occupancy_loss(zeros, truth).loss == doctest::Approx(std::log(2.0)));
  const std::vector<double> sure{40, -40, 40, -40};
  CHECK(occupancy_loss(sure, truth).loss < 1e-15);

  Rng rng(3);
  std::vector<double> x(6);
  std::vector<std::uint8_t> y(6);
  double hand = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    x[i] = rng.uniform(-3, 3);
    y[i] = static_cast<std::uint8_t>(rng.below(2));
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    hand += -(y[i] * std::log(s) + (1 - y[i]) * std::log(1 - s));
  }
  const auto res = occupancy_loss(x, y);
  CHECK(res.loss == doctest::Approx(hand / 6).epsilon(1e-12));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(res.grad.data[i] == doctest::Approx((1.0 / (1.0 + std::exp(-x[i])) - y[i]) / 6).epsilon(1e-12));
  }

  std::map<VoxelIndex, double> keyed{{{0, 0, 0}, 0.0}, {{1, 0, 0}, 0.0}};
  OccupancyMap occ{{{0, 0, 0}, true}, {{1, 0, 0}, false}};
  CHECK(occupancy_loss(keyed, occ) == doctest::Approx(std::log(2.0)));
  occ.erase({1, 0, 0});
  occ[{2, 0, 0}] = false;
  CHECK_THROWS_AS(occupancy_loss(keyed, occ), Error);
  CHECK_THROWS_AS(occupancy_loss(std::vector<double>{0.0}, std::vector<std::uint8_t>{}), Error);
}

TEST_CASE("image mse") {
  Rng rng(4);
  PatchImage truth{random_matrix(rng, 2, 3)};
  const std::vector<std::uint8_t> both{1, 1}, first{1, 0};
  CHECK(image_mse(truth, truth, both).loss == 0.0);
  PatchImage shifted = truth;
  for (auto &v : shifted.patches.data) v += 0.3;
  CHECK(image_mse(shifted, truth, both).loss == doctest::Approx(0.09));
  PatchImage pred{random_matrix(rng, 2, 3)};
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) s += std::pow(pred.patches(0, c) - truth.patches(0, c), 2);
  CHECK(image_mse(pred, truth, first).loss == doctest::Approx(s / 3));
  double all = 0.0;
  for (std::size_t k = 0; k < 6; ++k) all += std::pow(pred.patches.data[k] - truth.patches.data[k], 2);
  CHECK(image_mse(pred, truth, {}, false).loss == doctest::Approx(all / 6));
  PatchImage wrong{Matrix(3, 3)};
  CHECK_THROWS_AS(image_mse(wrong, truth, both), Error);
}

TEST_CASE("chamfer loss value and gradient") {
  Rng rng(5);
  std::vector<Vec3> gt(5), pred(4);
  for (auto &p : gt) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (auto &p : pred) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (auto variant : {ChamferVariant::Euclidean, ChamferVariant::Squared}) {
    const auto res = chamfer_loss(gt, pred, variant);
    CHECK(res.loss == doctest::Approx(semmask::chamfer_directional(gt, pred, variant) +
                                      semmask::chamfer_directional(pred, gt, variant)));
    const double h = 1e-6;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      for (std::size_t a = 0; a < 3; ++a) {
        auto up = pred, down = pred;
        up[j][a] += h;
        down[j][a] -= h;
        const double fd = (chamfer_loss(gt, up, variant).loss - chamfer_loss(gt, down, variant).loss) / (2 * h);
        CHECK(res.grad[j][a] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
  CHECK_THROWS_AS(chamfer_loss({}, pred), Error);
}

TEST_CASE("head shape and zero head") {
  SemanticHeadConfig cfg;
  CHECK(cfg.input_dim() == 131);
  CHECK(cfg.dims() == std::vector<std::size_t>{131, 64, 64, 11});
  const auto zero = SemanticHead::zeros(cfg);
  Rng rng(6);
  const auto logits = semantic_forward(zero, random_matrix(rng, 3, 131));
  for (double v : logits.data) CHECK(v == 0.0);
  CHECK_THROWS_AS(semantic_forward(zero, random_matrix(rng, 3, 130)), Error);
  SemanticHeadConfig raw = cfg;
  raw.num_classes = kNumRawLabels;
  CHECK(SemanticHead(raw).num_classes() == 32);
}

TEST_CASE("head forward matches an independent oracle and is batch independent") {
  const SemanticHead head(small_head(7));
  Rng rng(8);
  const auto z = random_matrix(rng, 6, head.input_dim());
  const auto logits = semantic_forward(head, z, Exec::Serial);
  const auto par = semantic_forward(head, z, Exec::Parallel);
  CHECK(logits.data == par.data);
  for (std::size_t r = 0; r < z.rows; ++r) {
    const auto expect = oracle_forward(head.mlp(), {z.row(r).begin(), z.row(r).end()});
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(logits(r, c) - expect[c]) < 1e-12);
    Matrix one(1, z.cols);
    std::copy(z.row(r).begin(), z.row(r).end(), one.data.begin());
    const auto single = semantic_forward(head, one);
    for (std::size_t c = 0; c < 4; ++c) CHECK(single(0, c) == logits(r, c));
  }
  // Permuting the batch permutes the logits.
  Matrix rev(z.rows, z.cols);
  for (std::size_t r = 0; r < z.rows; ++r) std::copy(z.row(r).begin(), z.row(r).end(), rev.row(z.rows - 1 - r).begin());
  const auto rl = semantic_forward(head, rev);
  for (std::size_t r = 0; r < z.rows; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(rl(z.rows - 1 - r, c) == logits(r, c));
  }
}

TEST_CASE("gradient check passes on random heads and detects a huge step") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SemanticHead head(small_head(seed));
    Rng rng(seed + 100);
    const auto z = random_matrix(rng, 5, head.input_dim());
    const auto labels = random_labels(rng, 5, 4);
    const auto report = gradient_check(head, z, labels, 1e-5, 1e-5);
    CHECK(report.passed);
    CHECK(report.blocks.size() == 6);
    CHECK(report.max_rel_error < 1e-5);
    CHECK_FALSE(gradient_check(head, z, labels, 1.0, 1e-5).passed);
  }
  // A zero head on a symmetric batch: every analytic gradient is exactly zero,
  // and the differences only carry rounding noise.
  const auto zero = SemanticHead::zeros(small_head(0));
  Matrix z(4, zero.input_dim(), 0.5);
  const auto flat = gradient_check(zero, z, std::vector<std::uint8_t>{0, 1, 2, 3}, 1e-5, 1e-5);
  for (const auto &b : flat.blocks) CHECK(b.max_abs_error < 1e-9);
  const auto s = semantic_loss_and_grads(zero, z, std::vector<std::uint8_t>{0, 1, 2, 3});
  for (const auto &g : s.grads.layers) {
    for (double v : g.weight) CHECK(v == 0.0);
    for (double v : g.bias) CHECK(v == 0.0);
  }
}

TEST_CASE("semantic loss decreases under small gradient steps") {
  SemanticHead head(small_head(11));
  Rng rng(12);
  const auto z = random_matrix(rng, 8, head.input_dim());
  const auto labels = random_labels(rng, 8, 4);
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    const auto s = semantic_loss_and_grads(head, z, labels);
    CHECK(s.loss < prev);
    prev = s.loss;
    head.mlp().sgd_step(s.grads, 0.05);
  }
}

TEST_CASE("input gradient matches finite differences") {
  const SemanticHead head(small_head(13));
  Rng rng(14);
  const auto z = random_matrix(rng, 3, head.input_dim());
  const auto labels = random_labels(rng, 3, 4);
  const auto s = semantic_loss_and_grads(head, z, labels, Exec::Serial);
  const double h = 1e-5;
  for (std::size_t k = 0; k < z.data.size(); ++k) {
    auto up = z, down = z;
    up.data[k] += h;
    down.data[k] -= h;
    const double fd = (semantic_loss(semantic_forward(head, up), labels).loss -
                       semantic_loss(semantic_forward(head, down), labels).loss) /
                      (2 * h);
    CHECK(s.grad_input.data[k] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("semantic inputs cover masked and visible voxels") {
  const auto grid = grid_from_voxels(row_of_voxels({{0, 0, kBackground}, {1}, {kIgnoreLabel, 2}}));
  const auto assignment = mask_uniform(grid, 0.5, 3);
  std::map<VoxelIndex, std::vector<double>> features;
  for (const auto &v : grid.voxels()) features[v.index] = std::vector<double>(kDecoderFeatureDim, v.index.x + 1.0);
  const auto inputs = build_semantic_inputs(grid, features, assignment);
  REQUIRE(inputs.size() == 5);  // the ignored point is left out
  for (const auto &in : inputs) {
    REQUIRE(in.z.size() == 131);
    CHECK(in.z[0] == in.voxel.x + 1.0);
    const auto &p = grid.source().points[in.point_id].position;
    const auto c = grid.at(in.voxel).center;
    CHECK(in.z[128] == p.x - c.x);
    CHECK(in.z[130] == p.z - c.z);
  }
  // Points of one voxel share the feature and differ in offset.
  CHECK(inputs[0].voxel == inputs[1].voxel);
  CHECK(inputs[0].z[128] != inputs[1].z[128]);
  CHECK(std::equal(inputs[0].z.begin(), inputs[0].z.begin() + 128, inputs[1].z.begin()));
  CHECK(stack_labels(inputs) == std::vector<std::uint8_t>{0, 0, kBackground, 1, 2});

  features.erase(grid.voxels()[1].index);
  CHECK_THROWS_AS(build_semantic_inputs(grid, features, assignment), Error);
}

TEST_CASE("head checkpoint round trip") {
  const SemanticHead head(small_head(21));
  const auto path = std::filesystem::temp_directory_path() / "semmask_head_test.ckpt";
  save_head(head, path);
  const auto back = load_head(path);
  CHECK(back == head);
  CHECK(back.config().hidden == head.config().hidden);
  CHECK(back.config().seed == 21);
  CHECK_THROWS_AS(load_head("/nonexistent/head.ckpt"), Error);
}
