#pragma once

// Differentiable primitives. Every function validates shapes (ShapeError
// naming both operands) and rejects non-finite operands (NumericError).
// Reductions run in a fixed row-major order so results are reproducible.

#include <cstdint>
#include <vector>

#include "kdgan/tensor.hpp"

namespace kdgan::ops {

// (M,K) x (K,N) -> (M,N).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// NCHW input, (Cout,Cin,kh,kw) weights, no bias. Lowered to patch
// unrolling plus GEMMs over chunks of images.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int pad);

// Elementwise with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> abs(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Reductions over one axis keep that axis with extent 1.
template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis);
// Full reductions produce a scalar of shape {}.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Zero padding of the two trailing (spatial) axes.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int pad);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// NCHW, no padding.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride);

// Batch normalization over every axis except axis 1, using the statistics
// of this batch. batch_mean/batch_var (biased) receive the per-channel
// statistics for running-average bookkeeping.
template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T eps, std::vector<T>* batch_mean, std::vector<T>* batch_var);

// Batch normalization with fixed per-channel statistics.
template <typename T>
Tensor<T> batch_norm_fixed(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::span<const T> mean, std::span<const T> var, T eps);

// Row-wise log-softmax of a (B,C) tensor, composed from max/sub/exp/sum/log.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);

}  // namespace kdgan::ops
