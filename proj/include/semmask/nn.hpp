#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semmask/common.hpp"
#include "semmask/rng.hpp"

namespace semmask {

/// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double &operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

enum class Activation { Tanh, Relu, Identity };

std::string_view activation_name(Activation a);
Activation activation_from_name(std::string_view name);

struct DenseLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> weight;  // out_dim x in_dim
  std::vector<double> bias;    // out_dim

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out) : in_dim(in), out_dim(out), weight(in * out, 0.0), bias(out, 0.0) {}

  /// Weights and biases uniform in +-1/sqrt(in_dim).
  static DenseLayer uniform_init(std::size_t in, std::size_t out, Rng &rng);

  Matrix forward(const Matrix &input, Exec exec = Exec::Parallel) const;
};

struct DenseGrad {
  std::vector<double> weight;
  std::vector<double> bias;

  explicit DenseGrad(const DenseLayer &layer) : weight(layer.weight.size(), 0.0), bias(layer.bias.size(), 0.0) {}
};

/// Accumulates parameter gradients into `grad` and returns dL/dinput.
Matrix dense_backward(const DenseLayer &layer, const Matrix &input, const Matrix &grad_output, DenseGrad &grad,
                      Exec exec = Exec::Parallel);

void apply_activation(Activation a, Matrix &m);
/// Multiplies `grad` in place by the activation derivative, given activated outputs.
void activation_backward(Activation a, const Matrix &activated, Matrix &grad);

/// Stack of dense layers; the activation follows every layer except the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<DenseLayer> layers, Activation activation);

  /// dims = {in, hidden..., out}.
  static Mlp uniform_init(std::span<const std::size_t> dims, Activation activation, std::uint64_t seed);
  static Mlp zeros(std::span<const std::size_t> dims, Activation activation);

  struct Cache {
    std::vector<Matrix> inputs;  // input to layer i (activated output of layer i-1)
  };

  Matrix forward(const Matrix &input, Exec exec = Exec::Parallel, Cache *cache = nullptr) const;

  struct Grads {
    std::vector<DenseGrad> layers;
  };
  Grads zero_grads() const;

  /// Backpropagates dL/doutput; returns dL/dinput.
  Matrix backward(const Cache &cache, const Matrix &grad_output, Grads &grads, Exec exec = Exec::Parallel) const;

  void sgd_step(const Grads &grads, double learning_rate);

  std::size_t input_dim() const { return layers_.front().in_dim; }
  std::size_t output_dim() const { return layers_.back().out_dim; }
  Activation activation() const { return activation_; }
  const std::vector<DenseLayer> &layers() const { return layers_; }
  std::vector<DenseLayer> &layers() { return layers_; }
  std::size_t parameter_count() const;

  friend bool operator==(const Mlp &a, const Mlp &b);

 private:
  std::vector<DenseLayer> layers_;
  Activation activation_ = Activation::Tanh;
};

}  // namespace semmask
