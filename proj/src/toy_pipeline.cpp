#include "semmask/toy_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

#include "semmask/rng.hpp"

namespace semmask {

namespace {

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kHeadStream = 2;
constexpr std::uint64_t kMaskPurpose = 0;
constexpr std::uint64_t kImagePurpose = 1;

std::string_view label_source_name(LabelSource s) { return s == LabelSource::Mapped ? "mapped" : "raw"; }

LabelSource label_source_from_name(const std::string &s) {
  if (s == "mapped") return LabelSource::Mapped;
  if (s == "raw") return LabelSource::Raw;
  throw Error(ErrorCode::InvalidArgument, "label source must be mapped or raw, got " + s);
}

std::string_view variant_name(ChamferVariant v) { return v == ChamferVariant::Euclidean ? "euclidean" : "squared"; }

ChamferVariant variant_from_name(const std::string &s) {
  if (s == "euclidean") return ChamferVariant::Euclidean;
  if (s == "squared") return ChamferVariant::Squared;
  throw Error(ErrorCode::InvalidArgument, "chamfer variant must be euclidean or squared, got " + s);
}

std::array<std::int64_t, 3> grid_dims(const VoxelGridConfig &cfg) {
  std::array<std::int64_t, 3> d{};
  for (std::size_t a = 0; a < 3; ++a) {
    d[a] = static_cast<std::int64_t>(std::ceil((cfg.range_max[a] - cfg.range_min[a]) / cfg.voxel_size[a]));
  }
  return d;
}

void sgd(std::vector<double> &params, const std::vector<double> &grad, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

std::size_t voxel_position(const VoxelGrid &grid, const Voxel *v) {
  return static_cast<std::size_t>(v - grid.voxels().data());
}

}  // namespace

void ToyModelConfig::validate() const {
  if (feature_dim == 0 || encoder_hidden == 0) throw Error(ErrorCode::InvalidArgument, "layer widths must be positive");
  if (points_per_voxel_out == 0) throw Error(ErrorCode::InvalidArgument, "points_per_voxel_out must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::InvalidArgument, "learning_rate must be positive");
  }
  if (image_patches == 0 || patch_pixels == 0) throw Error(ErrorCode::InvalidArgument, "image shape must be positive");
  for (auto h : head_hidden) {
    if (h == 0) throw Error(ErrorCode::InvalidArgument, "head hidden widths must be positive");
  }
}

SemanticHeadConfig ToyModelConfig::head_config() const {
  SemanticHeadConfig hc;
  hc.feature_dim = feature_dim;
  hc.hidden = head_hidden;
  hc.num_classes = label_source == LabelSource::Mapped ? kNumMappedLabels : kNumRawLabels;
  hc.activation = Activation::Tanh;
  hc.seed = derive_seed(seed, kHeadStream);
  return hc;
}

nlohmann::json ToyModelConfig::to_json() const {
  return {{"feature_dim", feature_dim},
          {"encoder_hidden", encoder_hidden},
          {"points_per_voxel_out", points_per_voxel_out},
          {"seed", seed},
          {"learning_rate", learning_rate},
          {"steps", steps},
          {"head_hidden", head_hidden},
          {"label_source", std::string(label_source_name(label_source))},
          {"image_patches", image_patches},
          {"patch_pixels", patch_pixels},
          {"chamfer_variant", std::string(variant_name(chamfer_variant))},
          {"exec", exec == Exec::Serial ? "serial" : "parallel"}};
}

ToyModelConfig ToyModelConfig::from_json(const nlohmann::json &j) {
  ToyModelConfig c;
  try {
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.points_per_voxel_out = j.value("points_per_voxel_out", c.points_per_voxel_out);
    c.seed = j.value("seed", c.seed);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.label_source = label_source_from_name(j.value("label_source", std::string("mapped")));
    c.image_patches = j.value("image_patches", c.image_patches);
    c.patch_pixels = j.value("patch_pixels", c.patch_pixels);
    c.chamfer_variant = variant_from_name(j.value("chamfer_variant", std::string("euclidean")));
    const auto exec = j.value("exec", std::string("parallel"));
    if (exec != "serial" && exec != "parallel") throw Error(ErrorCode::InvalidArgument, "exec must be serial or parallel");
    c.exec = exec == "serial" ? Exec::Serial : Exec::Parallel;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ToyScene prepare_scene(std::shared_ptr<const PointCloud> cloud, const VoxelGridConfig &voxel_config,
                       const LevelMap &levels, std::uint64_t image_seed, std::size_t image_patches,
                       std::size_t patch_pixels) {
  ToyScene s;
  s.grid = assign_groups(voxelize(std::move(cloud), voxel_config), levels, default_priority());
  const auto &cfg = s.grid.config();
  const auto dims = grid_dims(cfg);

  std::vector<VoxelIndex> domain;
  domain.reserve(s.grid.size() * 3);
  constexpr std::array<std::array<int, 3>, 6> kNeighbours = {
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  for (const auto &v : s.grid.voxels()) {
    domain.push_back(v.index);
    for (const auto &n : kNeighbours) {
      const VoxelIndex q{v.index.x + n[0], v.index.y + n[1], v.index.z + n[2]};
      if (q.x < 0 || q.y < 0 || q.z < 0 || q.x >= dims[0] || q.y >= dims[1] || q.z >= dims[2]) continue;
      if (!s.grid.contains(q)) domain.push_back(q);
    }
  }
  std::sort(domain.begin(), domain.end());
  domain.erase(std::unique(domain.begin(), domain.end()), domain.end());
  s.domain = std::move(domain);

  s.domain_occupied.assign(s.domain.size(), 0);
  s.domain_to_voxel.assign(s.domain.size(), ToyScene::npos);
  s.voxel_to_domain.assign(s.grid.size(), ToyScene::npos);
  s.positions = Matrix(s.domain.size(), kPositionDim);
  for (std::size_t d = 0; d < s.domain.size(); ++d) {
    if (const Voxel *v = s.grid.find(s.domain[d])) {
      const std::size_t pos = voxel_position(s.grid, v);
      s.domain_occupied[d] = 1;
      s.domain_to_voxel[d] = pos;
      s.voxel_to_domain[pos] = d;
    }
    const Vec3 c = s.grid.center_of(s.domain[d]);
    for (std::size_t a = 0; a < 3; ++a) {
      s.positions(d, a) = 2.0 * (c[a] - cfg.range_min[a]) / (cfg.range_max[a] - cfg.range_min[a]) - 1.0;
    }
  }

  s.stats = Matrix(s.grid.size(), kVoxelStatDim);
  const auto &points = s.grid.source().points;
  for (std::size_t i = 0; i < s.grid.size(); ++i) {
    const Voxel &v = s.grid.voxels()[i];
    const double n = static_cast<double>(v.point_ids.size());
    Vec3 mean;
    for (auto id : v.point_ids) mean = mean + points[id].position;
    mean = mean * (1.0 / n);
    Vec3 var;
    for (auto id : v.point_ids) {
      const Vec3 d = points[id].position - mean;
      var = var + Vec3{d.x * d.x, d.y * d.y, d.z * d.z};
    }
    var = var * (1.0 / n);
    s.stats(i, 0) = std::log1p(n) / 4.0;
    for (std::size_t a = 0; a < 3; ++a) {
      s.stats(i, 1 + a) = (mean[a] - v.center[a]) / cfg.voxel_size[a];
      s.stats(i, 4 + a) = std::sqrt(var[a]) / cfg.voxel_size[a];
    }
  }

  // Patches share a base pattern plus per-patch noise.
  Rng rng(image_seed);
  std::vector<double> base(patch_pixels);
  for (auto &b : base) b = rng.normal();
  s.image.patches = Matrix(image_patches, patch_pixels);
  for (std::size_t p = 0; p < image_patches; ++p) {
    for (std::size_t k = 0; k < patch_pixels; ++k) s.image.patches(p, k) = base[k] + 0.3 * rng.normal();
  }
  return s;
}

struct ToyModel::Trace {
  std::vector<std::uint8_t> masked;       // per grid voxel
  std::vector<std::size_t> visible;       // grid voxel positions, ascending
  std::vector<std::size_t> visible_row;   // per domain row: row in enc, or npos
  Matrix enc_in;
  Matrix enc;
  std::vector<double> ctx;
  Matrix dec_in;
  Outputs out;
};

ToyModel::ToyModel(const ToyModelConfig &config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, kModelStream));
  const std::size_t h = config_.encoder_hidden;
  encoder_ = DenseLayer::uniform_init(kVoxelStatDim + kPositionDim, h, rng);
  mask_token_.resize(h);
  for (auto &t : mask_token_) t = rng.uniform(-0.1, 0.1);
  decoder_ = DenseLayer::uniform_init(2 * h + kPositionDim, config_.feature_dim, rng);
  occ_head_ = DenseLayer::uniform_init(config_.feature_dim, 1, rng);
  point_head_ = DenseLayer::uniform_init(config_.feature_dim, 3 * config_.points_per_voxel_out, rng);
  image_head_ = DenseLayer::uniform_init(config_.patch_pixels, config_.patch_pixels, rng);
  head_ = SemanticHead(config_.head_config());
}

ToyModel::Trace ToyModel::trace(const ToyScene &scene, const MaskAssignment &assignment) const {
  const auto split = apply_mask(scene.grid, assignment);
  Trace t;
  const std::size_t h = config_.encoder_hidden;
  const std::size_t n_dom = scene.domain.size();
  t.masked.assign(scene.grid.size(), 0);
  for (const Voxel *v : split.masked) t.masked[voxel_position(scene.grid, v)] = 1;
  for (std::size_t i = 0; i < scene.grid.size(); ++i) {
    if (!t.masked[i]) t.visible.push_back(i);
  }

  t.enc_in = Matrix(t.visible.size(), kVoxelStatDim + kPositionDim);
  t.visible_row.assign(n_dom, ToyScene::npos);
  for (std::size_t r = 0; r < t.visible.size(); ++r) {
    const std::size_t vi = t.visible[r];
    const std::size_t d = scene.voxel_to_domain[vi];
    t.visible_row[d] = r;
    auto row = t.enc_in.row(r);
    std::copy_n(scene.stats.row(vi).begin(), kVoxelStatDim, row.begin());
    std::copy_n(scene.positions.row(d).begin(), kPositionDim, row.begin() + kVoxelStatDim);
  }
  t.enc = t.visible.empty() ? Matrix(0, h) : encoder_.forward(t.enc_in, config_.exec);
  apply_activation(Activation::Tanh, t.enc);

  t.ctx.assign(h, 0.0);
  for (std::size_t r = 0; r < t.enc.rows; ++r) {
    for (std::size_t k = 0; k < h; ++k) t.ctx[k] += t.enc(r, k);
  }
  if (t.enc.rows > 0) {
    for (auto &c : t.ctx) c /= static_cast<double>(t.enc.rows);
  }

  t.dec_in = Matrix(n_dom, 2 * h + kPositionDim);
  for (std::size_t d = 0; d < n_dom; ++d) {
    auto row = t.dec_in.row(d);
    if (t.visible_row[d] != ToyScene::npos) {
      std::copy_n(t.enc.row(t.visible_row[d]).begin(), h, row.begin());
    } else {
      std::copy_n(mask_token_.begin(), h, row.begin());
    }
    std::copy_n(scene.positions.row(d).begin(), kPositionDim, row.begin() + h);
    std::copy_n(t.ctx.begin(), h, row.begin() + h + kPositionDim);
  }
  if (n_dom == 0) {
    t.out.features = Matrix(0, config_.feature_dim);
    t.out.occupancy = Matrix(0, 1);
    t.out.point_offsets = Matrix(0, 3 * config_.points_per_voxel_out);
    return t;
  }
  t.out.features = decoder_.forward(t.dec_in, config_.exec);
  apply_activation(Activation::Tanh, t.out.features);
  t.out.occupancy = occ_head_.forward(t.out.features, config_.exec);
  t.out.point_offsets = point_head_.forward(t.out.features, config_.exec);
  return t;
}

ToyModel::Outputs ToyModel::forward(const ToyScene &scene, const MaskAssignment &assignment) const {
  return trace(scene, assignment).out;
}

namespace {

std::vector<Vec3> predicted_points(const ToyScene &scene, const Matrix &offsets, std::size_t d, std::size_t k) {
  const Vec3 c = scene.grid.center_of(scene.domain[d]);
  const Vec3 &size = scene.grid.config().voxel_size;
  std::vector<Vec3> pts(k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t a = 0; a < 3; ++a) pts[j][a] = c[a] + size[a] * offsets(d, 3 * j + a);
  }
  return pts;
}

std::vector<Vec3> voxel_points(const VoxelGrid &grid, const Voxel &v) {
  std::vector<Vec3> pts;
  pts.reserve(v.point_ids.size());
  for (auto id : v.point_ids) pts.push_back(grid.source().points[id].position);
  return pts;
}

}  // namespace

Reconstruction ToyModel::reconstruct(const ToyScene &scene, const MaskAssignment &assignment) const {
  const Trace t = trace(scene, assignment);
  Reconstruction r;
  for (std::size_t i = 0; i < scene.grid.size(); ++i) {
    if (!t.masked[i]) continue;
    const std::size_t d = scene.voxel_to_domain[i];
    r.points.emplace(scene.domain[d], predicted_points(scene, t.out.point_offsets, d, config_.points_per_voxel_out));
  }
  for (std::size_t d = 0; d < scene.domain.size(); ++d) r.occupancy.emplace(scene.domain[d], t.out.occupancy(d, 0) > 0.0);
  return r;
}

std::map<VoxelIndex, std::vector<double>> ToyModel::decoder_features(const ToyScene &scene,
                                                                     const MaskAssignment &assignment) const {
  const Outputs out = forward(scene, assignment);
  std::map<VoxelIndex, std::vector<double>> features;
  for (std::size_t d = 0; d < scene.domain.size(); ++d) {
    const auto row = out.features.row(d);
    features.emplace_hint(features.end(), scene.domain[d], std::vector<double>(row.begin(), row.end()));
  }
  return features;
}

ToyModel::StepResult ToyModel::step(std::span<const ToyScene> scenes, std::span<const MaskAssignment> masks,
                                    std::span<const std::vector<std::uint8_t>> image_masks, double lambda_sem,
                                    SemanticBranch branch, bool update) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyCorpus, "no scenes to train on");
  if (masks.size() != scenes.size() || image_masks.size() != scenes.size()) {
    throw Error(ErrorCode::InvalidArgument, "one mask and one image mask per scene required");
  }
  if (!(lambda_sem >= 0.0)) throw Error(ErrorCode::InvalidArgument, "lambda_sem must be non-negative");

  const double inv_s = 1.0 / static_cast<double>(scenes.size());
  const std::size_t h = config_.encoder_hidden;
  const std::size_t k_out = config_.points_per_voxel_out;
  const bool semantic = branch == SemanticBranch::On;
  const bool semantic_grad = semantic && lambda_sem > 0.0;

  DenseGrad g_enc(encoder_), g_dec(decoder_), g_occ(occ_head_), g_pts(point_head_), g_img(image_head_);
  std::vector<double> g_token(h, 0.0);
  Mlp::Grads g_head = head_.mlp().zero_grads();
  double l_img = 0.0, l_c = 0.0, l_occ = 0.0, l_sem = 0.0;

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const ToyScene &scene = scenes[s];
    const Trace t = trace(scene, masks[s]);
    const std::size_t n_dom = scene.domain.size();
    const Vec3 &size = scene.grid.config().voxel_size;

    // Chamfer over masked voxels.
    Matrix d_off(n_dom, 3 * k_out);
    std::size_t n_masked = 0;
    for (auto m : t.masked) n_masked += m;
    double scene_c = 0.0;
    if (n_masked > 0) {
      const double scale = inv_s / static_cast<double>(n_masked);
      for (std::size_t i = 0; i < scene.grid.size(); ++i) {
        if (!t.masked[i]) continue;
        const std::size_t d = scene.voxel_to_domain[i];
        const auto gt = voxel_points(scene.grid, scene.grid.voxels()[i]);
        const auto pred = predicted_points(scene, t.out.point_offsets, d, k_out);
        const auto cl = chamfer_loss(gt, pred, config_.chamfer_variant);
        scene_c += cl.loss;
        for (std::size_t j = 0; j < k_out; ++j) {
          for (std::size_t a = 0; a < 3; ++a) d_off(d, 3 * j + a) = cl.grad[j][a] * size[a] * scale;
        }
      }
      scene_c /= static_cast<double>(n_masked);
    }
    l_c += scene_c * inv_s;

    // Occupancy over the domain.
    auto occ = occupancy_loss(t.out.occupancy.data, scene.domain_occupied);
    l_occ += occ.loss * inv_s;
    for (auto &g : occ.grad.data) g *= inv_s;

    Matrix d_feat = dense_backward(point_head_, t.out.features, d_off, g_pts, config_.exec);
    const Matrix d_feat_occ = dense_backward(occ_head_, t.out.features, occ.grad, g_occ, config_.exec);
    for (std::size_t i = 0; i < d_feat.data.size(); ++i) d_feat.data[i] += d_feat_occ.data[i];

    // Semantic head on every labeled point of the occupied voxels.
    if (semantic && scene.grid.labeled()) {
      Matrix z;
      std::vector<std::uint8_t> labels;
      std::vector<std::size_t> row_domain;
      {
        const auto features = [&] {
          std::map<VoxelIndex, std::vector<double>> f;
          for (std::size_t d = 0; d < n_dom; ++d) {
            if (!scene.domain_occupied[d]) continue;
            const auto row = t.out.features.row(d);
            f.emplace_hint(f.end(), scene.domain[d], std::vector<double>(row.begin(), row.end()));
          }
          return f;
        }();
        const auto inputs = build_semantic_inputs(scene.grid, features, masks[s], config_.label_source);
        z = stack_inputs(inputs);
        labels = stack_labels(inputs);
        row_domain.reserve(inputs.size());
        for (const auto &in : inputs) {
          row_domain.push_back(scene.voxel_to_domain[voxel_position(scene.grid, scene.grid.find(in.voxel))]);
        }
      }
      const auto sem = semantic_loss_and_grads(head_, z, labels, config_.exec);
      l_sem += sem.loss * inv_s;
      if (semantic_grad) {
        const double scale = lambda_sem * inv_s;
        for (std::size_t r = 0; r < sem.grad_input.rows; ++r) {
          auto dst = d_feat.row(row_domain[r]);
          const auto src = sem.grad_input.row(r);
          for (std::size_t k = 0; k < config_.feature_dim; ++k) dst[k] += scale * src[k];
        }
        for (std::size_t l = 0; l < g_head.layers.size(); ++l) {
          for (std::size_t i = 0; i < g_head.layers[l].weight.size(); ++i) {
            g_head.layers[l].weight[i] += scale * sem.grads.layers[l].weight[i];
          }
          for (std::size_t i = 0; i < g_head.layers[l].bias.size(); ++i) {
            g_head.layers[l].bias[i] += scale * sem.grads.layers[l].bias[i];
          }
        }
      }
    }

    // Decoder and encoder.
    if (n_dom > 0) {
      activation_backward(Activation::Tanh, t.out.features, d_feat);
      const Matrix d_dec_in = dense_backward(decoder_, t.dec_in, d_feat, g_dec, config_.exec);
      Matrix d_enc(t.enc.rows, h);
      std::vector<double> d_ctx(h, 0.0);
      for (std::size_t d = 0; d < n_dom; ++d) {
        const auto row = d_dec_in.row(d);
        if (t.visible_row[d] != ToyScene::npos) {
          auto dst = d_enc.row(t.visible_row[d]);
          for (std::size_t k = 0; k < h; ++k) dst[k] += row[k];
        } else {
          for (std::size_t k = 0; k < h; ++k) g_token[k] += row[k];
        }
        for (std::size_t k = 0; k < h; ++k) d_ctx[k] += row[h + kPositionDim + k];
      }
      if (t.enc.rows > 0) {
        const double inv_v = 1.0 / static_cast<double>(t.enc.rows);
        for (std::size_t r = 0; r < t.enc.rows; ++r) {
          for (std::size_t k = 0; k < h; ++k) d_enc(r, k) += d_ctx[k] * inv_v;
        }
        activation_backward(Activation::Tanh, t.enc, d_enc);
        dense_backward(encoder_, t.enc_in, d_enc, g_enc, config_.exec);
      }
    }

    // Image branch.
    const auto &truth = scene.image.patches;
    const auto &pmask = image_masks[s];
    if (pmask.size() != truth.rows) throw Error(ErrorCode::ShapeMismatch, "one image mask flag per patch");
    Matrix x(1, truth.cols);
    std::size_t n_vis = 0;
    for (std::size_t p = 0; p < truth.rows; ++p) {
      if (pmask[p]) continue;
      ++n_vis;
      for (std::size_t k = 0; k < truth.cols; ++k) x(0, k) += truth(p, k);
    }
    if (n_vis > 0) {
      for (auto &v : x.data) v /= static_cast<double>(n_vis);
    }
    const Matrix y = image_head_.forward(x, Exec::Serial);
    PatchImage pred{Matrix(truth.rows, truth.cols)};
    for (std::size_t p = 0; p < truth.rows; ++p) std::copy(y.data.begin(), y.data.end(), pred.patches.row(p).begin());
    const auto img = image_mse(pred, scene.image, pmask, true);
    l_img += img.loss * inv_s;
    Matrix d_y(1, truth.cols);
    for (std::size_t p = 0; p < truth.rows; ++p) {
      for (std::size_t k = 0; k < truth.cols; ++k) d_y(0, k) += img.grad(p, k) * inv_s;
    }
    dense_backward(image_head_, x, d_y, g_img, Exec::Serial);
  }

  StepResult result;
  result.losses = total_loss(l_img, l_c, l_occ, semantic ? l_sem : 0.0, lambda_sem);
  if (update) {
    const double lr = config_.learning_rate;
    sgd(encoder_.weight, g_enc.weight, lr);
    sgd(encoder_.bias, g_enc.bias, lr);
    sgd(mask_token_, g_token, lr);
    sgd(decoder_.weight, g_dec.weight, lr);
    sgd(decoder_.bias, g_dec.bias, lr);
    sgd(occ_head_.weight, g_occ.weight, lr);
    sgd(occ_head_.bias, g_occ.bias, lr);
    sgd(point_head_.weight, g_pts.weight, lr);
    sgd(point_head_.bias, g_pts.bias, lr);
    sgd(image_head_.weight, g_img.weight, lr);
    sgd(image_head_.bias, g_img.bias, lr);
    if (semantic_grad) head_.mlp().sgd_step(g_head, lr);
  }
  return result;
}

std::vector<double> ToyModel::reconstruction_parameters() const {
  std::vector<double> p;
  auto add = [&](const std::vector<double> &v) { p.insert(p.end(), v.begin(), v.end()); };
  for (const DenseLayer *l : {&encoder_, &decoder_, &occ_head_, &point_head_, &image_head_}) {
    add(l->weight);
    add(l->bias);
  }
  add(mask_token_);
  return p;
}

bool operator==(const ToyModel &a, const ToyModel &b) {
  return a.reconstruction_parameters() == b.reconstruction_parameters() && a.head_ == b.head_;
}

std::uint64_t stream_seed(std::uint64_t root, std::uint64_t step, std::uint64_t scene, std::uint64_t purpose) {
  return derive_seed(derive_seed(derive_seed(root, step), scene), purpose);
}

std::vector<std::uint8_t> image_patch_mask(std::size_t patches, double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "rho must lie in [0, 1]");
  Rng rng(seed);
  std::vector<std::uint8_t> mask(patches, 0);
  for (auto p : sample_without_replacement(patches, masking_budget(rho, patches), rng)) mask[p] = 1;
  return mask;
}

TrainResult train_toy(const ToyModelConfig &config, std::span<const ToyScene> scenes, const MaskPolicy &policy,
                      double lambda_sem, SemanticBranch branch) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyCorpus, "no scenes to train on");
  policy.validate();
  TrainResult result{ToyModel(config), {}, {}};
  result.log.reserve(config.steps + 1);
  for (std::size_t t = 0; t <= config.steps; ++t) {
    std::vector<MaskAssignment> masks;
    std::vector<std::vector<std::uint8_t>> image_masks;
    std::vector<std::size_t> counts;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      MaskPolicy p = policy;
      p.seed = stream_seed(policy.seed, t, s, kMaskPurpose);
      masks.push_back(generate_mask(scenes[s].grid, p));
      counts.push_back(masks.back().masked.size());
      image_masks.push_back(
          image_patch_mask(scenes[s].image.patches.rows, policy.rho, stream_seed(policy.seed, t, s, kImagePurpose)));
    }
    const bool update = t < config.steps;
    result.log.push_back(result.model.step(scenes, masks, image_masks, lambda_sem, branch, update).losses);
    if (update) result.masked_counts.push_back(std::move(counts));
  }
  return result;
}

void write_loss_log_csv(std::span<const LossBreakdown> log, std::ostream &out) {
  out << "step,l_img,l_c,l_occ,l_sem,lambda_sem,l_base,l_total\n";
  out << std::setprecision(17);
  for (std::size_t t = 0; t < log.size(); ++t) {
    const auto &l = log[t];
    out << t << ',' << l.l_img << ',' << l.l_c << ',' << l.l_occ << ',' << l.l_sem << ',' << l.lambda_sem << ','
        << l.l_base << ',' << l.l_total << '\n';
  }
}

nlohmann::json AnalysisConfig::to_json() const {
  std::vector<std::string> names;
  for (auto c : classes) names.emplace_back(class_name(c));
  return {{"tau", tau},
          {"rho", rho},
          {"seeds", seeds},
          {"classes", names},
          {"strict_budget", strict_budget},
          {"include_occupancy", ranking.include_occupancy},
          {"high_threshold", ranking.high_threshold},
          {"medium_threshold", ranking.medium_threshold},
          {"weights", format_group_weights(ranking.weights)},
          {"chamfer_variant", std::string(variant_name(eval.variant))},
          {"aggregation", eval.aggregation == ChamferAggregation::PerVoxel ? "per_voxel" : "global"}};
}

std::vector<ClassId> classes_present(std::span<const ToyScene> scenes) {
  std::array<bool, kNumDetectionClasses> seen{};
  for (const auto &s : scenes) {
    for (const auto &v : s.grid.voxels()) {
      for (ClassId c = 0; c < kNumDetectionClasses; ++c) seen[c] = seen[c] || v.count_of(c) > 0;
    }
  }
  std::vector<ClassId> out;
  for (ClassId c = 0; c < kNumDetectionClasses; ++c) {
    if (seen[c]) out.push_back(c);
  }
  return out;
}

namespace {

/// Chamfer averaged over inputs that evaluated at least one voxel; occupancy over all.
ReconMetrics average_metrics(std::span<const ReconMetrics> ms) {
  ReconMetrics avg;
  double g2p = 0.0, p2g = 0.0, occ = 0.0;
  std::size_t valid = 0;
  for (const auto &m : ms) {
    avg.evaluated_voxels += m.evaluated_voxels;
    avg.unreconstructed_voxels += m.unreconstructed_voxels;
    occ += m.occupancy_accuracy;
    if (m.evaluated_voxels == 0) continue;
    g2p += m.chamfer_gt_to_pred;
    p2g += m.chamfer_pred_to_gt;
    ++valid;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  avg.chamfer_gt_to_pred = valid ? g2p / static_cast<double>(valid) : nan;
  avg.chamfer_pred_to_gt = valid ? p2g / static_cast<double>(valid) : nan;
  avg.occupancy_accuracy = ms.empty() ? nan : occ / static_cast<double>(ms.size());
  return avg;
}

}  // namespace

namespace {

AnalysisRun analyze(std::span<const ToyModel *const> models, std::span<const ToyScene> scenes,
                    const AnalysisConfig &config, const std::vector<ClassId> &classes) {
  AnalysisRun run;
  run.config = config;
  run.classes = classes;
  const std::size_t n_scenes = scenes.size();
  const std::size_t n_seeds = config.seeds.size();
  run.cells.resize(run.classes.size() * n_scenes * n_seeds);
  for (std::size_t ci = 0; ci < run.classes.size(); ++ci) {
    for (std::size_t s = 0; s < n_scenes; ++s) {
      for (std::size_t k = 0; k < n_seeds; ++k) {
        auto &cell = run.cells[(ci * n_scenes + s) * n_seeds + k];
        cell.class_id = run.classes[ci];
        cell.scene = s;
        cell.seed = config.seeds[k];
      }
    }
  }

  const auto n_cells = static_cast<std::int64_t>(run.cells.size());
  const std::size_t per_class = n_scenes * n_seeds;
  ReconstructionEvalConfig eval = config.eval;
  eval.exec = Exec::Serial;
#pragma omp parallel for schedule(dynamic) if (config.eval.exec == Exec::Parallel)
  for (std::int64_t i = 0; i < n_cells; ++i) {
    auto &cell = run.cells[static_cast<std::size_t>(i)];
    const ToyModel &model = *models[static_cast<std::size_t>(i) / per_class];
    try {
      const ToyScene &scene = scenes[cell.scene];
      const auto assignment = mask_class_target(scene.grid, cell.class_id, config.tau, config.rho,
                                                stream_seed(cell.seed, 0, cell.scene, kMaskPurpose),
                                                config.strict_budget);
      cell.num_voxels = assignment.num_voxels;
      cell.masked = assignment.masked.size();
      cell.target_count = assignment.target_count;
      cell.target_truncated = assignment.target_truncated;
      cell.metrics = evaluate_reconstruction(scene.grid, model.reconstruct(scene, assignment), assignment, eval);
    } catch (const std::exception &e) {
      cell.error = e.what();
    }
  }

  std::map<ClassId, ReconMetrics> rankable;
  for (std::size_t ci = 0; ci < run.classes.size(); ++ci) {
    std::vector<ReconMetrics> ms;
    for (std::size_t j = 0; j < per_class; ++j) {
      const auto &cell = run.cells[ci * per_class + j];
      if (cell.error) {
        run.partial = true;
        continue;
      }
      ms.push_back(cell.metrics);
    }
    const ReconMetrics avg = average_metrics(ms);
    run.per_class[run.classes[ci]] = avg;
    if (std::isnan(avg.chamfer_gt_to_pred) || std::isnan(avg.occupancy_accuracy)) {
      run.partial = true;
      continue;
    }
    rankable[run.classes[ci]] = avg;
  }
  if (rankable.empty()) throw Error(ErrorCode::EmptySet, "no analysis cell produced a Chamfer value");
  run.report = rank_importance(rankable, config.ranking);
  return run;
}

std::vector<ClassId> analysis_classes(std::span<const ToyScene> scenes, const AnalysisConfig &config) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyCorpus, "no scenes to analyze");
  if (config.seeds.empty()) throw Error(ErrorCode::InvalidArgument, "at least one masking seed required");
  if (config.tau < 1) throw Error(ErrorCode::InvalidArgument, "tau must be at least 1");
  if (!(config.rho >= 0.0 && config.rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "rho must lie in [0, 1]");
  auto classes = config.classes.empty() ? classes_present(scenes) : config.classes;
  if (classes.empty()) throw Error(ErrorCode::MissingClass, "no detection class present in the corpus");
  for (auto c : classes) {
    if (c >= kNumDetectionClasses) throw Error(ErrorCode::InvalidArgument, "not a detection class id");
  }
  return classes;
}

}  // namespace

AnalysisRun run_class_importance_analysis(const ToyModel &model, std::span<const ToyScene> scenes,
                                          const AnalysisConfig &config) {
  const auto classes = analysis_classes(scenes, config);
  const std::vector<const ToyModel *> models(classes.size(), &model);
  return analyze(models, scenes, config, classes);
}

AnalysisRun run_class_importance_analysis_retrained(const ToyModelConfig &model_config,
                                                    std::span<const ToyScene> scenes, const AnalysisConfig &config,
                                                    std::uint64_t mask_root, double lambda_sem) {
  const auto classes = analysis_classes(scenes, config);
  std::vector<ToyModel> trained;
  trained.reserve(classes.size());
  for (auto c : classes) {
    MaskPolicy p;
    p.kind = ClassTargetMasking{c, config.tau};
    p.rho = config.rho;
    p.seed = mask_root;
    trained.push_back(train_toy(model_config, scenes, p, lambda_sem).model);
  }
  std::vector<const ToyModel *> models;
  for (const auto &m : trained) models.push_back(&m);
  return analyze(models, scenes, config, classes);
}

nlohmann::json AnalysisRun::mask_stats_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto &c : cells) {
    nlohmann::json j = {{"class", std::string(class_name(c.class_id))},
                        {"scene", c.scene},
                        {"seed", c.seed},
                        {"num_voxels", c.num_voxels},
                        {"masked", c.masked},
                        {"target_count", c.target_count},
                        {"target_truncated", c.target_truncated},
                        {"metrics", c.metrics.to_json()}};
    if (c.error) j["error"] = *c.error;
    cells_json.push_back(std::move(j));
  }
  nlohmann::json per = nlohmann::json::object();
  for (const auto &[c, m] : per_class) per[std::string(class_name(c))] = m.to_json();
  return {{"config", config.to_json()}, {"partial", partial}, {"per_class", per}, {"cells", cells_json}};
}

nlohmann::json ImportancePolicy::to_json() const {
  nlohmann::json lv = nlohmann::json::object();
  nlohmann::json cw = nlohmann::json::object();
  for (const auto &[c, l] : levels) lv[std::string(class_name(c))] = std::string(level_name(l));
  for (const auto &[c, w] : class_weights) cw[std::string(class_name(c))] = w;
  std::vector<std::string> filled;
  for (auto c : filled_classes) filled.emplace_back(class_name(c));
  return {{"policy", policy.to_json()}, {"levels", lv}, {"class_weights", cw}, {"filled_classes", filled}};
}

ImportancePolicy ImportancePolicy::from_json(const nlohmann::json &j) {
  ImportancePolicy p;
  try {
    p.policy = MaskPolicy::from_json(j.at("policy"));
    for (const auto &[name, l] : j.at("levels").items()) p.levels[class_from_name(name)] = level_from_name(l.get<std::string>());
    for (const auto &[name, w] : j.at("class_weights").items()) p.class_weights[class_from_name(name)] = w.get<double>();
    for (const auto &name : j.value("filled_classes", std::vector<std::string>{})) {
      p.filled_classes.push_back(class_from_name(name));
    }
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, std::string("importance policy: ") + e.what());
  }
  if (!std::holds_alternative<ImportanceMasking>(p.policy.kind)) {
    throw Error(ErrorCode::InvalidArgument, "importance policy file holds a " + p.policy.kind_name() + " policy");
  }
  return p;
}

ImportancePolicy build_policy_from_report(const ImportanceReport &report, const GroupWeights &weight_table,
                                          double rho, std::uint64_t seed, std::optional<Level> fill_level) {
  ImportancePolicy out;
  out.policy.kind = ImportanceMasking{weight_table};
  out.policy.rho = rho;
  out.policy.seed = seed;
  out.policy.validate();
  for (const auto &row : report.rows) {
    if (row.class_id < kNumDetectionClasses) out.levels[row.class_id] = row.level;
  }
  for (ClassId c = 0; c < kNumDetectionClasses; ++c) {
    if (!out.levels.contains(c)) {
      if (!fill_level) throw Error(ErrorCode::MissingLevel, "report has no level for " + std::string(class_name(c)));
      out.levels[c] = *fill_level;
      out.filled_classes.push_back(c);
    }
    out.class_weights[c] = weight_table[static_cast<std::size_t>(group_of(out.levels[c]))];
  }
  return out;
}

LevelMap levels_from_policy(const ImportancePolicy &policy) {
  const auto *imp = std::get_if<ImportanceMasking>(&policy.policy.kind);
  if (imp == nullptr) throw Error(ErrorCode::InvalidArgument, "not an importance-weighted policy");
  LevelMap levels;
  for (const auto &[c, w] : policy.class_weights) {
    std::optional<Level> found;
    for (Level l : {Level::High, Level::Medium, Level::Low}) {
      if (imp->weights[static_cast<std::size_t>(group_of(l))] != w) continue;
      if (found) throw Error(ErrorCode::InvalidArgument, "weight table does not separate the levels");
      found = l;
    }
    if (!found) throw Error(ErrorCode::MissingLevel, "weight of " + std::string(class_name(c)) + " matches no level");
    levels[c] = *found;
  }
  return levels;
}

void ComparisonReport::write_csv(std::ostream &out) const {
  out << "policy,kind,rho,lambda_sem,final_l_img,final_l_c,final_l_occ,final_l_sem,final_l_total,"
         "chamfer_gt_to_pred,chamfer_pred_to_gt,occupancy_accuracy,masked_total,masked_high,masked_medium,"
         "masked_low,masked_background\n";
  out << std::setprecision(10);
  for (const auto &o : outcomes) {
    const LossBreakdown last = o.log.empty() ? LossBreakdown{} : o.log.back();
    std::size_t total = 0;
    std::array<std::size_t, kNumGroups> groups{};
    for (std::size_t s = 0; s < o.masked_totals.size(); ++s) {
      for (std::size_t k = 0; k < o.masked_totals[s].size(); ++k) {
        total += o.masked_totals[s][k];
        for (std::size_t g = 0; g < kNumGroups; ++g) groups[g] += o.group_tallies[s][k][g].masked;
      }
    }
    out << o.name << ',' << o.kind << ',' << o.rho << ',' << o.lambda_sem << ',' << last.l_img << ',' << last.l_c
        << ',' << last.l_occ << ',' << last.l_sem << ',' << last.l_total << ',' << o.final_metrics.chamfer_gt_to_pred
        << ',' << o.final_metrics.chamfer_pred_to_gt << ',' << o.final_metrics.occupancy_accuracy << ',' << total;
    for (auto g : groups) out << ',' << g;
    out << '\n';
  }
}

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &o : outcomes) {
    nlohmann::json tallies = nlohmann::json::array();
    for (std::size_t s = 0; s < o.group_tallies.size(); ++s) {
      for (std::size_t k = 0; k < o.group_tallies[s].size(); ++k) {
        nlohmann::json g = nlohmann::json::object();
        for (auto grp : kAllGroups) {
          const auto &t = o.group_tallies[s][k][static_cast<std::size_t>(grp)];
          g[std::string(group_name(grp))] = {{"masked", t.masked}, {"total", t.total}};
        }
        tallies.push_back({{"scene", s}, {"seed_index", k}, {"masked", o.masked_totals[s][k]}, {"groups", g}});
      }
    }
    arr.push_back({{"name", o.name},
                   {"kind", o.kind},
                   {"rho", o.rho},
                   {"lambda_sem", o.lambda_sem},
                   {"final_losses", o.log.empty() ? nlohmann::json(nullptr) : o.log.back().to_json()},
                   {"final_metrics", o.final_metrics.to_json()},
                   {"masks", tallies}});
  }
  return {{"budgets_equal", budgets_equal}, {"outcomes", arr}};
}

ComparisonReport compare_policies(const ToyModelConfig &config, std::span<const ToyScene> scenes,
                                  std::span<const PolicyVariant> variants, std::span<const std::uint64_t> seeds) {
  if (variants.size() < 2) throw Error(ErrorCode::PolicyCountError, "comparison needs at least two policies");
  if (scenes.empty()) throw Error(ErrorCode::EmptyCorpus, "no scenes to compare on");
  if (seeds.empty()) throw Error(ErrorCode::InvalidArgument, "at least one evaluation seed required");

  ComparisonReport report;
  report.outcomes.resize(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto &o = report.outcomes[v];
    o.name = variants[v].name;
    o.kind = variants[v].policy.kind_name();
    o.rho = variants[v].policy.rho;
    o.lambda_sem = variants[v].lambda_sem;
    o.masked_totals.assign(scenes.size(), std::vector<std::size_t>(seeds.size()));
    o.group_tallies.assign(scenes.size(), std::vector<std::array<GroupTally, kNumGroups>>(seeds.size()));
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        MaskPolicy p = variants[v].policy;
        p.seed = stream_seed(seeds[k], 0, s, kMaskPurpose);
        const auto a = generate_mask(scenes[s].grid, p);
        o.masked_totals[s][k] = a.masked.size();
        o.group_tallies[s][k] = a.per_group_masked;
      }
    }
    if (o.masked_totals != report.outcomes.front().masked_totals) {
      report.budgets_equal = false;
      throw Error(ErrorCode::BudgetMismatch,
                  "policy " + o.name + " masks a different number of voxels than " + report.outcomes.front().name);
    }
  }

  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto &o = report.outcomes[v];
    auto trained = train_toy(config, scenes, variants[v].policy, variants[v].lambda_sem, variants[v].branch);
    o.log = std::move(trained.log);
    std::vector<ReconMetrics> ms;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        const auto a = mask_uniform(scenes[s].grid, variants[v].policy.rho, stream_seed(seeds[k], 0, s, kMaskPurpose));
        ms.push_back(evaluate_reconstruction(scenes[s].grid, trained.model.reconstruct(scenes[s], a), a));
      }
    }
    o.final_metrics = average_metrics(ms);
  }
  return report;
}

}  // namespace semmask
