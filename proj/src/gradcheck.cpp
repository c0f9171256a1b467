#include "kdgan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace kdgan {

double gradient_check_leaves(const std::function<TensorD()>& f, const std::vector<TensorD>& leaves, double step) {
  std::vector<TensorD> inputs = leaves;
  for (auto& leaf : inputs) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& leaf : inputs) {
    analytic.emplace_back(leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                          : std::vector<double>(static_cast<std::size_t>(leaf.numel()), 0.0));
    leaf.zero_grad();
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = f().item();
      values[i] = saved - step;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

double gradient_check(const std::function<TensorD(const TensorD&)>& f, const TensorD& x, double step) {
  TensorD leaf = TensorD::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  return gradient_check_leaves([&] { return f(leaf); }, {leaf}, step);
}

}  // namespace kdgan
