#include "kdgan/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kdgan {

void SgdConfig::validate() const {
  if (!(lr0 >= 0.0)) throw std::invalid_argument("sgd: lr0 must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd: momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("sgd: weight_decay must be >= 0");
  if (!(decay_factor > 0.0)) throw std::invalid_argument("sgd: decay_factor must be positive");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) throw std::invalid_argument("sgd: milestones must be strictly increasing");
  }
}

SgdConfig SgdConfig::rescaled(int reference_epochs, int epochs) const {
  SgdConfig out = *this;
  out.milestones.clear();
  for (int m : milestones) {
    const int scaled = static_cast<int>(std::lround(static_cast<double>(m) * epochs / reference_epochs));
    if (out.milestones.empty() || scaled > out.milestones.back()) out.milestones.push_back(scaled);
  }
  return out;
}

double lr_at_epoch(const SgdConfig& cfg, int epoch) {
  double lr = cfg.lr0;
  for (int m : cfg.milestones) {
    if (m <= epoch) lr *= cfg.decay_factor;
  }
  return lr;
}

Sgd::Sgd(ParameterSet<float> params, SgdConfig cfg) : params_(std::move(params)), cfg_(std::move(cfg)) {
  cfg_.validate();
  velocity_.reserve(params_.trainable.size());
  for (const auto& p : params_.trainable) velocity_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
}

void Sgd::step(double lr) {
  const float momentum = static_cast<float>(cfg_.momentum);
  const float decay = static_cast<float>(cfg_.weight_decay);
  const float rate = static_cast<float>(lr);
  // Validate everything first so a bad gradient leaves all parameters untouched.
  for (std::size_t k = 0; k < params_.trainable.size(); ++k) {
    const auto& p = params_.trainable[k];
    if (p.tensor.has_grad()) {
      if (p.tensor.grad().size() != velocity_[k].size()) {
        throw ShapeError("sgd: gradient of " + p.name + " does not match parameter shape " + to_string(p.tensor.shape()));
      }
      for (float g : p.tensor.grad()) {
        if (!std::isfinite(g)) throw NumericError("sgd: non-finite gradient for parameter " + p.name);
      }
    }
  }
  for (std::size_t k = 0; k < params_.trainable.size(); ++k) {
    TensorF t = params_.trainable[k].tensor;
    auto values = t.mutable_values();
    auto grad = t.grad();
    auto& v = velocity_[k];
    const bool has_grad = !grad.empty();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float g = (has_grad ? grad[i] : 0.0f) + decay * values[i];
      v[i] = momentum * v[i] + g;
      values[i] -= rate * v[i];
    }
  }
}

}  // namespace kdgan
