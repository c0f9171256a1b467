#include "kdgan/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "kdgan/ops.hpp"

namespace kdgan {

template <typename T>
void ParameterSet<T>::zero_grad() const {
  for (const auto& p : trainable) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
}

template <typename T>
std::vector<Tensor<T>> ParameterSet<T>::trainable_tensors() const {
  std::vector<Tensor<T>> out;
  out.reserve(trainable.size());
  for (const auto& p : trainable) out.push_back(p.tensor);
  return out;
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(normal(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int pad_, Rng& init_rng)
    : weight(he_normal<T>(Shape{out_channels, in_channels, kernel, kernel},
                          static_cast<std::int64_t>(in_channels) * kernel * kernel, init_rng)),
      stride(stride_),
      pad(pad_) {}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, stride, pad);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParameterSet<T>& out) const {
  out.trainable.push_back({prefix + ".weight", weight});
}

template <typename T>
Linear<T>::Linear(int in_features, int out_features, Rng& init_rng)
    : weight(he_normal<T>(Shape{in_features, out_features}, in_features, init_rng)),
      bias(Tensor<T>::zeros(Shape{out_features}, true)) {}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ops::add(ops::matmul(x, weight), bias);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParameterSet<T>& out) const {
  out.trainable.push_back({prefix + ".weight", weight});
  out.trainable.push_back({prefix + ".bias", bias});
}

template <typename T>
BatchNorm<T>::BatchNorm(int channels, BatchNormConfig cfg)
    : gamma(Tensor<T>::full(Shape{channels}, T(1), true)),
      beta(Tensor<T>::zeros(Shape{channels}, true)),
      running_mean(Tensor<T>::zeros(Shape{channels})),
      running_var(Tensor<T>::full(Shape{channels}, T(1))),
      config(cfg) {}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const T eps = static_cast<T>(config.eps);
  if (mode == Mode::kEval) {
    return ops::batch_norm_fixed(x, gamma, beta, running_mean.values(), running_var.values(), eps);
  }
  std::vector<T> mean, var;
  Tensor<T> y = ops::batch_norm_train(x, gamma, beta, eps, &mean, &var);
  const std::int64_t count = x.numel() / x.dim(1);
  const T unbias = static_cast<T>(count) / static_cast<T>(count - 1);
  const T m = static_cast<T>(config.momentum);
  auto rm = running_mean.mutable_values();
  auto rv = running_var.mutable_values();
  for (std::size_t c = 0; c < mean.size(); ++c) {
    rm[c] = (T(1) - m) * rm[c] + m * mean[c];
    rv[c] = (T(1) - m) * rv[c] + m * var[c] * unbias;
  }
  return y;
}

template <typename T>
void BatchNorm<T>::collect(const std::string& prefix, ParameterSet<T>& out) const {
  out.trainable.push_back({prefix + ".gamma", gamma});
  out.trainable.push_back({prefix + ".beta", beta});
  out.buffers.push_back({prefix + ".running_mean", running_mean});
  out.buffers.push_back({prefix + ".running_var", running_var});
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0,1)");
  if (mode == Mode::kEval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Each 64-bit draw supplies two 32-bit uniforms; drop when u < rate.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 32));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    const std::uint64_t bits = rng();
    mask[i] = (bits & 0xffffffffULL) < threshold ? T(0) : keep_scale;
    if (i + 1 < mask.size()) mask[i + 1] = (bits >> 32) < threshold ? T(0) : keep_scale;
  }
  return ops::mul(x, Tensor<T>::from(x.shape(), std::move(mask)));
}

void ResidualBlockSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("residual block: channel counts must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("residual block: dropout_rate must lie in [0,1)");
  }
  if (kind == Kind::kMlp && (in_channels != out_channels || stride != 1)) {
    throw std::invalid_argument("residual block: mlp blocks keep their width and use stride 1");
  }
  if (stride < 1) throw std::invalid_argument("residual block: stride must be >= 1");
}

template <typename T>
ResidualBlock<T>::ResidualBlock(ResidualBlockSpec spec, Rng& init_rng, BatchNormConfig bn)
    : bn1(spec.in_channels, bn), bn2(spec.out_channels, bn), spec_(spec) {
  spec_.validate();
  if (spec_.kind == ResidualBlockSpec::Kind::kConv) {
    conv1.emplace(spec_.in_channels, spec_.out_channels, 3, spec_.stride, 1, init_rng);
    conv2.emplace(spec_.out_channels, spec_.out_channels, 3, 1, 1, init_rng);
    if (spec_.needs_projection()) projection.emplace(spec_.in_channels, spec_.out_channels, 1, spec_.stride, 0, init_rng);
  } else {
    fc1.emplace(spec_.in_channels, spec_.out_channels, init_rng);
    fc2.emplace(spec_.out_channels, spec_.out_channels, init_rng);
  }
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() < 2 || x.dim(1) != spec_.in_channels) {
    throw ShapeError("residual block expects " + std::to_string(spec_.in_channels) + " channels, got " +
                     to_string(x.shape()));
  }
  const bool conv = spec_.kind == ResidualBlockSpec::Kind::kConv;
  Tensor<T> activated = ops::relu(bn1.forward(x, mode));
  Tensor<T> h = conv ? conv1->forward(activated) : fc1->forward(activated);
  h = dropout(h, spec_.dropout_rate, mode, rng);
  h = ops::relu(bn2.forward(h, mode));
  h = conv ? conv2->forward(h) : fc2->forward(h);
  Tensor<T> shortcut = projection ? projection->forward(activated) : x;
  if (shortcut.shape() != h.shape()) {
    throw std::logic_error("residual block: shortcut " + to_string(shortcut.shape()) + " does not match branch " +
                           to_string(h.shape()));
  }
  return ops::add(shortcut, h);
}

template <typename T>
void ResidualBlock<T>::collect(const std::string& prefix, ParameterSet<T>& out) const {
  bn1.collect(prefix + ".bn1", out);
  if (conv1) conv1->collect(prefix + ".conv1", out);
  if (fc1) fc1->collect(prefix + ".fc1", out);
  bn2.collect(prefix + ".bn2", out);
  if (conv2) conv2->collect(prefix + ".conv2", out);
  if (fc2) fc2->collect(prefix + ".fc2", out);
  if (projection) projection->collect(prefix + ".shortcut", out);
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;
template Tensor<float> he_normal<float>(Shape, std::int64_t, Rng&);
template Tensor<double> he_normal<double>(Shape, std::int64_t, Rng&);
template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template Tensor<float> dropout<float>(const Tensor<float>&, double, Mode, Rng&);
template Tensor<double> dropout<double>(const Tensor<double>&, double, Mode, Rng&);
template class ResidualBlock<float>;
template class ResidualBlock<double>;

}  // namespace kdgan
