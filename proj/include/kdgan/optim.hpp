#pragma once

#include <vector>

#include "kdgan/layers.hpp"

namespace kdgan {

struct SgdConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> milestones{80, 160};
  double decay_factor = 0.1;

  void validate() const;
  // Milestones rescaled from a `reference_epochs` schedule onto `epochs`,
  // preserving their fractional positions (80/160 of 200 -> 40% / 80%).
  SgdConfig rescaled(int reference_epochs, int epochs) const;
};

// lr0 * decay_factor^(number of milestones <= epoch).
double lr_at_epoch(const SgdConfig& cfg, int epoch);

// Momentum SGD with coupled weight decay:
//   v <- momentum * v + (grad + weight_decay * param)
//   param <- param - lr * v
// Buffers (running statistics) are never touched.
class Sgd {
 public:
  Sgd(ParameterSet<float> params, SgdConfig cfg);

  // Applies one update with the gradients currently stored on the
  // parameters; a parameter without a gradient is treated as zero grad.
  void step(double lr);
  void zero_grad() const { params_.zero_grad(); }

  const SgdConfig& config() const { return cfg_; }
  const std::vector<std::vector<float>>& velocity() const { return velocity_; }
  const ParameterSet<float>& parameters() const { return params_; }

 private:
  ParameterSet<float> params_;
  SgdConfig cfg_;
  std::vector<std::vector<float>> velocity_;
};

}  // namespace kdgan
