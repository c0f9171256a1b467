#pragma once

#include <functional>
#include <vector>

#include "kdgan/tensor.hpp"

namespace kdgan {

// Compares the reverse-mode gradient of a scalar function against central
// differences. Returns max over elements of
//   |analytic - numeric| / max(1, |analytic|).
double gradient_check(const std::function<TensorD(const TensorD&)>& f, const TensorD& x, double step = 1e-5);

// Same comparison for a closure over existing leaves (layer parameters).
// Each leaf is perturbed in place and restored; f must be deterministic.
double gradient_check_leaves(const std::function<TensorD()>& f, const std::vector<TensorD>& leaves,
                             double step = 1e-5);

}  // namespace kdgan
