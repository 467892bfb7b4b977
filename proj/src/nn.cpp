#include "semmask/nn.hpp"

#include <cmath>

#include "semmask/kernels.hpp"

namespace semmask {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

Activation activation_from_name(std::string_view name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "identity") return Activation::Identity;
  throw Error(ErrorCode::InvalidArgument, "unknown activation '" + std::string(name) + "'");
}

DenseLayer DenseLayer::uniform_init(std::size_t in, std::size_t out, Rng &rng) {
  DenseLayer layer(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto &w : layer.weight) w = rng.uniform(-bound, bound);
  for (auto &b : layer.bias) b = rng.uniform(-bound, bound);
  return layer;
}

Matrix DenseLayer::forward(const Matrix &input, Exec exec) const {
  if (input.cols != in_dim) {
    throw Error(ErrorCode::DimensionMismatch,
                "layer expects " + std::to_string(in_dim) + " inputs, got " + std::to_string(input.cols));
  }
  Matrix out(input.rows, out_dim);
  kernels::dense_forward(weight, bias, input.data, out.data, input.rows, in_dim, out_dim, exec);
  return out;
}

Matrix dense_backward(const DenseLayer &layer, const Matrix &input, const Matrix &grad_output, DenseGrad &grad,
                      Exec exec) {
  kernels::dense_backward_params(grad_output.data, input.data, grad.weight, grad.bias, input.rows, layer.in_dim,
                                 layer.out_dim, exec);
  Matrix grad_in(input.rows, layer.in_dim);
  kernels::dense_backward_input(grad_output.data, layer.weight, grad_in.data, input.rows, layer.in_dim,
                                layer.out_dim, exec);
  return grad_in;
}

void apply_activation(Activation a, Matrix &m) {
  switch (a) {
    case Activation::Tanh:
      for (auto &v : m.data) v = std::tanh(v);
      break;
    case Activation::Relu:
      for (auto &v : m.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::Identity:
      break;
  }
}

void activation_backward(Activation a, const Matrix &activated, Matrix &grad) {
  switch (a) {
    case Activation::Tanh:
      for (std::size_t i = 0; i < grad.data.size(); ++i) {
        const double y = activated.data[i];
        grad.data[i] *= 1.0 - y * y;
      }
      break;
    case Activation::Relu:
      for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (!(activated.data[i] > 0.0)) grad.data[i] = 0.0;
      }
      break;
    case Activation::Identity:
      break;
  }
}

Mlp::Mlp(std::vector<DenseLayer> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  if (layers_.empty()) throw Error(ErrorCode::InvalidArgument, "an MLP needs at least one layer");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in_dim != layers_[i - 1].out_dim) {
      throw Error(ErrorCode::DimensionMismatch, "consecutive layer dimensions disagree");
    }
  }
}

Mlp Mlp::uniform_init(std::span<const std::size_t> dims, Activation activation, std::uint64_t seed) {
  if (dims.size() < 2) throw Error(ErrorCode::InvalidArgument, "an MLP needs input and output dimensions");
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers.push_back(DenseLayer::uniform_init(dims[i], dims[i + 1], rng));
  return Mlp(std::move(layers), activation);
}

Mlp Mlp::zeros(std::span<const std::size_t> dims, Activation activation) {
  if (dims.size() < 2) throw Error(ErrorCode::InvalidArgument, "an MLP needs input and output dimensions");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers.emplace_back(dims[i], dims[i + 1]);
  return Mlp(std::move(layers), activation);
}

Matrix Mlp::forward(const Matrix &input, Exec exec, Cache *cache) const {
  if (cache) cache->inputs.clear();
  Matrix x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (cache) cache->inputs.push_back(x);
    Matrix y = layers_[i].forward(x, exec);
    if (i + 1 < layers_.size()) apply_activation(activation_, y);
    x = std::move(y);
  }
  return x;
}

Mlp::Grads Mlp::zero_grads() const {
  Grads g;
  for (const auto &l : layers_) g.layers.emplace_back(l);
  return g;
}

Matrix Mlp::backward(const Cache &cache, const Matrix &grad_output, Grads &grads, Exec exec) const {
  Matrix g = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (i + 1 < layers_.size()) activation_backward(activation_, cache.inputs[i + 1], g);
    g = dense_backward(layers_[i], cache.inputs[i], g, grads.layers[i], exec);
  }
  return g;
}

void Mlp::sgd_step(const Grads &grads, double learning_rate) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto &l = layers_[i];
    for (std::size_t k = 0; k < l.weight.size(); ++k) l.weight[k] -= learning_rate * grads.layers[i].weight[k];
    for (std::size_t k = 0; k < l.bias.size(); ++k) l.bias[k] -= learning_rate * grads.layers[i].bias[k];
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto &l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

bool operator==(const Mlp &a, const Mlp &b) {
  if (a.activation_ != b.activation_ || a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto &x = a.layers_[i];
    const auto &y = b.layers_[i];
    if (x.in_dim != y.in_dim || x.out_dim != y.out_dim || x.weight != y.weight || x.bias != y.bias) return false;
  }
  return true;
}

}  // namespace semmask
