#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kdgan/tensor.hpp"

namespace kdgan {

enum class Mode { kTrain, kEval };

using Rng = std::mt19937_64;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Handles onto a model's state. `trainable` receive gradients and optimizer
// updates; `buffers` are batch-norm running statistics.
template <typename T>
struct ParameterSet {
  std::vector<NamedTensor<T>> trainable;
  std::vector<NamedTensor<T>> buffers;

  void zero_grad() const;
  std::vector<Tensor<T>> trainable_tensors() const;
};

struct BatchNormConfig {
  double eps = 1e-5;
  double momentum = 0.1;
};

// Weights N(0, 2/fan_in). Draws are made in double precision so float and
// double copies built from the same seed hold the same values.
template <typename T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, Rng& rng);

template <typename T>
class Conv2d {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& init_rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& out) const;

  Tensor<T> weight;  // (out, in, k, k)
  int stride;
  int pad;
};

template <typename T>
class Linear {
 public:
  Linear(int in_features, int out_features, Rng& init_rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& out) const;

  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out)
};

template <typename T>
class BatchNorm {
 public:
  explicit BatchNorm(int channels, BatchNormConfig config = {});
  // Train mode normalizes with batch statistics and folds them into the
  // running averages (unbiased variance); eval mode uses the running values.
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect(const std::string& prefix, ParameterSet<T>& out) const;

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  BatchNormConfig config;
};

// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in eval mode
// and at rate 0; neither case touches the generator.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);

struct ResidualBlockSpec {
  enum class Kind { kConv, kMlp };
  Kind kind = Kind::kConv;
  int in_channels = 16;
  int out_channels = 16;
  int stride = 1;
  double dropout_rate = 0.0;

  void validate() const;
  bool needs_projection() const { return in_channels != out_channels || stride != 1; }
};

// Pre-activation residual block:
//   f(x) = W2(ReLU(BN2(dropout(W1(ReLU(BN1(x)))))))
//   out  = shortcut(x) + f(x)
// The shortcut is the identity, or a strided 1x1 convolution applied to
// ReLU(BN1(x)) when the shape changes.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock(ResidualBlockSpec spec, Rng& init_rng, BatchNormConfig bn = {});
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng);
  void collect(const std::string& prefix, ParameterSet<T>& out) const;

  const ResidualBlockSpec& spec() const { return spec_; }

  BatchNorm<T> bn1;
  BatchNorm<T> bn2;
  std::optional<Conv2d<T>> conv1, conv2, projection;
  std::optional<Linear<T>> fc1, fc2;

 private:
  ResidualBlockSpec spec_;
};

}  // namespace kdgan
