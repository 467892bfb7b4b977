#include "semmask/semantic_head.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace semmask {

std::vector<std::size_t> SemanticHeadConfig::dims() const {
  std::vector<std::size_t> d{input_dim()};
  d.insert(d.end(), hidden.begin(), hidden.end());
  d.push_back(num_classes);
  return d;
}

SemanticHead::SemanticHead(const SemanticHeadConfig &config)
    : config_(config), mlp_(Mlp::uniform_init(config.dims(), config.activation, config.seed)) {}

SemanticHead::SemanticHead(const SemanticHeadConfig &config, Mlp mlp) : config_(config), mlp_(std::move(mlp)) {
  if (mlp_.input_dim() != config_.input_dim() || mlp_.output_dim() != config_.num_classes) {
    throw Error(ErrorCode::DimensionMismatch, "MLP shape does not match the head configuration");
  }
}

SemanticHead SemanticHead::zeros(const SemanticHeadConfig &config) {
  return SemanticHead(config, Mlp::zeros(config.dims(), config.activation));
}

std::vector<SemanticInput> build_semantic_inputs(const VoxelGrid &grid,
                                                 const std::map<VoxelIndex, std::vector<double>> &decoder_features,
                                                 const MaskAssignment &assignment, LabelSource source) {
  apply_mask(grid, assignment);  // GridMismatch check only
  if (!grid.labeled()) return {};
  const PointCloud &cloud = grid.source();
  const std::vector<std::uint8_t> *labels = nullptr;
  if (source == LabelSource::Mapped) {
    if (cloud.label_space != LabelSpace::Detection) {
      throw Error(ErrorCode::InvalidArgument, "mapped supervision needs a cloud with detection labels");
    }
    labels = &*cloud.labels;
  } else {
    labels = cloud.label_space == LabelSpace::Raw ? &*cloud.labels : (cloud.raw_labels ? &*cloud.raw_labels : nullptr);
    if (labels == nullptr) throw Error(ErrorCode::InvalidArgument, "raw supervision needs raw labels");
  }

  // Masked and visible voxels alike, in ascending index order.
  std::vector<SemanticInput> out;
  std::size_t feature_dim = 0;
  for (const auto &v : grid.voxels()) {
    auto it = decoder_features.find(v.index);
    if (it == decoder_features.end()) {
      throw Error(ErrorCode::MissingFeature, "no decoder feature for voxel " + to_string(v.index));
    }
    const auto &f = it->second;
    if (feature_dim == 0) feature_dim = f.size();
    if (f.size() != feature_dim) throw Error(ErrorCode::DimensionMismatch, "decoder features differ in width");
    for (auto id : v.point_ids) {
      const std::uint8_t label = (*labels)[id];
      if (label == kIgnoreLabel) continue;
      SemanticInput in;
      in.z.reserve(f.size() + kOffsetDim);
      in.z.assign(f.begin(), f.end());
      const Vec3 d = cloud.points[id].position - v.center;
      in.z.push_back(d.x);
      in.z.push_back(d.y);
      in.z.push_back(d.z);
      in.label = label;
      in.point_id = id;
      in.voxel = v.index;
      out.push_back(std::move(in));
    }
  }
  return out;
}

Matrix stack_inputs(std::span<const SemanticInput> inputs) {
  if (inputs.empty()) return {};
  Matrix z(inputs.size(), inputs.front().z.size());
  for (std::size_t r = 0; r < inputs.size(); ++r) {
    if (inputs[r].z.size() != z.cols) throw Error(ErrorCode::DimensionMismatch, "semantic inputs differ in width");
    std::copy(inputs[r].z.begin(), inputs[r].z.end(), z.row(r).begin());
  }
  return z;
}

std::vector<std::uint8_t> stack_labels(std::span<const SemanticInput> inputs) {
  std::vector<std::uint8_t> labels(inputs.size());
  std::transform(inputs.begin(), inputs.end(), labels.begin(), [](const SemanticInput &in) { return in.label; });
  return labels;
}

Matrix semantic_forward(const SemanticHead &head, const Matrix &z, Exec exec, Mlp::Cache *cache) {
  if (z.rows > 0 && z.cols != head.input_dim()) {
    throw Error(ErrorCode::DimensionMismatch,
                "head expects " + std::to_string(head.input_dim()) + " inputs, got " + std::to_string(z.cols));
  }
  if (z.rows == 0) return Matrix(0, head.num_classes());
  return head.mlp().forward(z, exec, cache);
}

Matrix semantic_forward(const SemanticHead &head, std::span<const SemanticInput> inputs, Exec exec) {
  return semantic_forward(head, stack_inputs(inputs), exec);
}

SemanticStep semantic_loss_and_grads(const SemanticHead &head, const Matrix &z, std::span<const std::uint8_t> labels,
                                     Exec exec) {
  SemanticStep step;
  step.grads = head.mlp().zero_grads();
  if (z.rows == 0) {
    step.grad_input = Matrix(0, head.input_dim());
    return step;
  }
  Mlp::Cache cache;
  const Matrix logits = semantic_forward(head, z, exec, &cache);
  const auto loss = semantic_loss(logits, labels);
  step.loss = loss.loss;
  step.grad_input = head.mlp().backward(cache, loss.grad, step.grads, exec);
  return step;
}

GradCheckReport gradient_check(const SemanticHead &head, const Matrix &z, std::span<const std::uint8_t> labels,
                               double step, double tolerance) {
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "finite-difference step must be positive");
  const auto analytic = semantic_loss_and_grads(head, z, labels, Exec::Serial);

  SemanticHead probe = head;
  auto loss_at = [&]() { return semantic_loss(semantic_forward(probe, z, Exec::Serial), labels).loss; };

  GradCheckReport report;
  report.passed = true;
  auto check_block = [&](const std::string &name, std::vector<double> &params, const std::vector<double> &grad) {
    GradCheckBlock block;
    block.name = name;
    block.size = params.size();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double saved = params[k];
      params[k] = saved + step;
      const double up = loss_at();
      params[k] = saved - step;
      const double down = loss_at();
      params[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double abs_err = std::abs(grad[k] - numeric);
      const double denom = std::max({std::abs(grad[k]), std::abs(numeric), kGradCheckFloor});
      block.max_abs_error = std::max(block.max_abs_error, abs_err);
      block.max_rel_error = std::max(block.max_rel_error, abs_err / denom);
    }
    block.passed = block.max_rel_error < tolerance;
    report.passed = report.passed && block.passed;
    report.max_rel_error = std::max(report.max_rel_error, block.max_rel_error);
    report.blocks.push_back(block);
  };

  auto &layers = probe.mlp().layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check_block("layer" + std::to_string(i) + ".weight", layers[i].weight, analytic.grads.layers[i].weight);
    check_block("layer" + std::to_string(i) + ".bias", layers[i].bias, analytic.grads.layers[i].bias);
  }
  return report;
}

void save_head(const SemanticHead &head, const std::filesystem::path &path) {
  const auto &cfg = head.config();
  nlohmann::json header = {{"format", "semmask-semantic-head"},
                           {"version", 1},
                           {"input_dim", cfg.input_dim()},
                           {"feature_dim", cfg.feature_dim},
                           {"hidden", cfg.hidden},
                           {"num_classes", cfg.num_classes},
                           {"activation", std::string(activation_name(cfg.activation))},
                           {"seed", cfg.seed},
                           {"num_params", head.mlp().parameter_count()},
                           {"dtype", "float64-le"}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << header.dump() << '\n';
  auto put = [&](double v) {
    auto u = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((u >> (8 * b)) & 0xFFU);
    out.write(bytes, 8);
  };
  for (const auto &layer : head.mlp().layers()) {
    for (double w : layer.weight) put(w);
    for (double b : layer.bias) put(b);
  }
}

SemanticHead load_head(const std::filesystem::path &path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path.string());
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::getline(in, line);
  SemanticHeadConfig cfg;
  std::size_t num_params = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "semmask-semantic-head") throw Error(ErrorCode::ParseError, "not a head checkpoint");
    cfg.feature_dim = header.at("feature_dim").get<std::size_t>();
    cfg.hidden = header.at("hidden").get<std::vector<std::size_t>>();
    cfg.num_classes = header.at("num_classes").get<std::size_t>();
    cfg.activation = activation_from_name(header.at("activation").get<std::string>());
    cfg.seed = header.at("seed").get<std::uint64_t>();
    num_params = header.at("num_params").get<std::size_t>();
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  SemanticHead head = SemanticHead::zeros(cfg);
  if (head.mlp().parameter_count() != num_params) throw Error(ErrorCode::ParseError, "parameter count mismatch");
  auto get = [&]() {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char *>(bytes), 8)) throw Error(ErrorCode::TruncatedFile, path.string());
    std::uint64_t u = 0;
    for (int b = 7; b >= 0; --b) u = (u << 8) | bytes[b];
    return std::bit_cast<double>(u);
  };
  for (auto &layer : head.mlp().layers()) {
    for (double &w : layer.weight) w = get();
    for (double &b : layer.bias) b = get();
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::ParseError, "trailing bytes in checkpoint");
  return head;
}

}  // namespace semmask
