#include "kdgan/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string_view>

#include "gemm.hpp"

namespace kdgan::ops {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_output(Shape shape, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(static_cast<std::size_t>(numel(shape)), T(0));
  node->shape = std::move(shape);
  node->seq = next_node_sequence();
  node->op = op;
  return node;
}

// Attaches operands and a backward rule when any operand requires grad.
template <typename T, typename Rule>
Tensor<T> finish(NodePtr<T> out, std::vector<NodePtr<T>> inputs, Rule rule) {
  bool needs = false;
  if (grad_enabled()) {
    for (auto& in : inputs) needs |= in->requires_grad;
  }
  if (needs) {
    out->requires_grad = true;
    out->inputs = std::move(inputs);
    out->backward = std::move(rule);
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
void check_operand(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined operand");
  // Op outputs are immutable, so each needs checking only once.
  Node<T>& node = *t.node();
  if (node.finite_checked) return;
  require_finite<T>(t.values(), op);
  if (node.op != std::string_view("leaf")) node.finite_checked = true;
}

std::string shape_pair(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
};

std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t step = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : step;
    step *= in[i];
  }
  return strides;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(shape_pair(op, a, b));
    bc.out[i] = std::max(da, db);
  }
  bc.stride_a = broadcast_strides(a, bc.out);
  bc.stride_b = broadcast_strides(b, bc.out);
  return bc;
}

// Visits output elements in row-major order with the matching operand offsets.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::int64_t total = numel(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::int64_t> index(rank, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++index[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (index[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      index[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  check_operand(a, op);
  check_operand(b, op);
  Broadcast bc = broadcast(a.shape(), b.shape(), op);
  auto out = make_output<T>(bc.out, op);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out->value.data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ov[i] = av[ia] + bv[ib]; });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ov[i] = av[ia] - bv[ib]; });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ov[i] = av[ia] * bv[ib]; });
      break;
    case BinaryKind::kDiv:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ov[i] = av[ia] / bv[ib]; });
      break;
  }
  return finish<T>(out, {a.node(), b.node()}, [bc, kind](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    const T* g = self.grad.data();
    const T* av = na.value.data();
    const T* bv = nb.value.data();
    if (na.requires_grad) {
      na.ensure_grad();
      T* ga = na.grad.data();
      switch (kind) {
        case BinaryKind::kAdd:
        case BinaryKind::kSub:
          for_each_broadcast(bc, [&](auto i, auto ia, auto) { ga[ia] += g[i]; });
          break;
        case BinaryKind::kMul:
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] * bv[ib]; });
          break;
        case BinaryKind::kDiv:
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] / bv[ib]; });
          break;
      }
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      T* gb = nb.grad.data();
      switch (kind) {
        case BinaryKind::kAdd:
          for_each_broadcast(bc, [&](auto i, auto, auto ib) { gb[ib] += g[i]; });
          break;
        case BinaryKind::kSub:
          for_each_broadcast(bc, [&](auto i, auto, auto ib) { gb[ib] -= g[i]; });
          break;
        case BinaryKind::kMul:
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { gb[ib] += g[i] * av[ia]; });
          break;
        case BinaryKind::kDiv:
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { gb[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]); });
          break;
      }
    }
  });
}

// ---- patch unrolling -------------------------------------------------------

struct ConvGeometry {
  int channels, height, width, kernel_h, kernel_w, stride, pad, out_h, out_w;
};

// Valid output columns [lo, hi) for kernel column kw: 0 <= ow*stride - pad + kw < width.
inline void valid_columns(const ConvGeometry& g, int kw, int& lo, int& hi) {
  const int shift = kw - g.pad;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  hi = (g.width - 1 - shift) < 0 ? 0 : (g.width - 1 - shift) / g.stride + 1;
  hi = std::min(hi, g.out_w);
  lo = std::min(lo, hi);
}

// Writes the patch matrix of one image into columns [col_offset, col_offset +
// out_area) of a (patch x ld) matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::size_t ld, std::size_t col_offset) {
  for (int c = 0; c < g.channels; ++c) {
    for (int kh = 0; kh < g.kernel_h; ++kh) {
      for (int kw = 0; kw < g.kernel_w; ++kw) {
        T* row = col + static_cast<std::size_t>((c * g.kernel_h + kh) * g.kernel_w + kw) * ld + col_offset;
        int lo = 0, hi = 0;
        valid_columns(g, kw, lo, hi);
        const int shift = kw - g.pad;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + ih) * g.width;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image, std::size_t ld, std::size_t col_offset) {
  for (int c = 0; c < g.channels; ++c) {
    for (int kh = 0; kh < g.kernel_h; ++kh) {
      for (int kw = 0; kw < g.kernel_w; ++kw) {
        const T* row = col + static_cast<std::size_t>((c * g.kernel_h + kh) * g.kernel_w + kw) * ld + col_offset;
        int lo = 0, hi = 0;
        valid_columns(g, kw, lo, hi);
        const int shift = kw - g.pad;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = image + (c * g.height + ih) * g.width;
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow + shift] += src[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + shift] += src[ow];
          }
        }
      }
    }
  }
}

// Images per GEMM: enough columns to keep the multiply efficient while the
// patch buffer stays within L2 (2 MB).
int images_per_chunk(int patch, int out_area, int batch) {
  const std::int64_t budget = std::int64_t{1} << 19;
  const std::int64_t per_image = static_cast<std::int64_t>(patch) * out_area;
  return static_cast<int>(std::clamp<std::int64_t>(budget / std::max<std::int64_t>(per_image, 1), 1, batch));
}

// ---- axis reductions -------------------------------------------------------

struct AxisSplit {
  std::int64_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, int axis, bool average, const char* op) {
  check_operand(x, op);
  axis = normalize_axis(axis, x.rank(), op);
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = 1;
  auto out = make_output<T>(out_shape, op);
  const T* xv = x.values().data();
  T* ov = out->value.data();
  const T norm = average ? T(1) / static_cast<T>(s.extent) : T(1);
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t k = 0; k < s.extent; ++k) {
      const T* src = xv + (o * s.extent + k) * s.inner;
      T* dst = ov + o * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  if (average) {
    for (auto& v : out->value) v *= norm;
  }
  return finish<T>(out, {x.node()}, [s, norm](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* g = self.grad.data() + o * s.inner;
      for (std::int64_t k = 0; k < s.extent; ++k) {
        T* dst = in.grad.data() + (o * s.extent + k) * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += g[i] * norm;
      }
    }
  });
}

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, bool average, const char* op) {
  check_operand(x, op);
  auto out = make_output<T>(Shape{}, op);
  T acc = T(0);
  for (T v : x.values()) acc += v;
  const T norm = average ? T(1) / static_cast<T>(x.numel()) : T(1);
  out->value[0] = acc * norm;
  return finish<T>(out, {x.node()}, [norm](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    const T g = self.grad[0] * norm;
    for (auto& v : in.grad) v += g;
  });
}

template <typename T>
struct ChannelLayout {
  std::int64_t batch, channels, inner;
};

template <typename T>
ChannelLayout<T> channel_layout(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": input needs a channel axis, got " + to_string(x.shape()));
  ChannelLayout<T> l{x.dim(0), x.dim(1), 1};
  for (std::size_t i = 2; i < x.rank(); ++i) l.inner *= x.dim(i);
  if (gamma.shape() != Shape{l.channels}) throw ShapeError(shape_pair(op, x.shape(), gamma.shape()));
  if (beta.shape() != Shape{l.channels}) throw ShapeError(shape_pair(op, x.shape(), beta.shape()));
  return l;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_operand(a, "matmul");
  check_operand(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(shape_pair("matmul", a.shape(), b.shape()));
  }
  const int m = static_cast<int>(a.dim(0));
  const int k = static_cast<int>(a.dim(1));
  const int n = static_cast<int>(b.dim(1));
  auto out = make_output<T>(Shape{m, n}, "matmul");
  detail::gemm(false, false, m, n, k, T(1), a.values().data(), k, b.values().data(), n, T(0), out->value.data(), n);
  return finish<T>(out, {a.node(), b.node()}, [m, n, k](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    if (na.requires_grad) {
      na.ensure_grad();
      detail::gemm(false, true, m, k, n, T(1), self.grad.data(), n, nb.value.data(), n, T(1), na.grad.data(), k);
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      detail::gemm(true, false, k, n, m, T(1), na.value.data(), k, self.grad.data(), n, T(1), nb.grad.data(), n);
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int pad) {
  check_operand(input, "conv2d");
  check_operand(weight, "conv2d");
  if (input.rank() != 4 || weight.rank() != 4 || input.dim(1) != weight.dim(1)) {
    throw ShapeError(shape_pair("conv2d", input.shape(), weight.shape()));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
  ConvGeometry g{};
  g.channels = static_cast<int>(input.dim(1));
  g.height = static_cast<int>(input.dim(2));
  g.width = static_cast<int>(input.dim(3));
  g.kernel_h = static_cast<int>(weight.dim(2));
  g.kernel_w = static_cast<int>(weight.dim(3));
  g.stride = stride;
  g.pad = pad;
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError(shape_pair("conv2d", input.shape(), weight.shape()));
  const int batch = static_cast<int>(input.dim(0));
  const int out_channels = static_cast<int>(weight.dim(0));
  const int patch = g.channels * g.kernel_h * g.kernel_w;
  const int out_area = g.out_h * g.out_w;
  const int in_area = g.channels * g.height * g.width;

  auto out = make_output<T>(Shape{batch, out_channels, g.out_h, g.out_w}, "conv2d");
  const int chunk = images_per_chunk(patch, out_area, batch);
  {
    std::vector<T> col(static_cast<std::size_t>(patch) * out_area * chunk);
    std::vector<T> tmp(static_cast<std::size_t>(out_channels) * out_area * chunk);
    const T* x = input.values().data();
    const T* w = weight.values().data();
    for (int b0 = 0; b0 < batch; b0 += chunk) {
      const int nb = std::min(chunk, batch - b0);
      const std::size_t ld = static_cast<std::size_t>(nb) * out_area;
      for (int j = 0; j < nb; ++j) {
        im2col(x + static_cast<std::size_t>(b0 + j) * in_area, g, col.data(), ld, static_cast<std::size_t>(j) * out_area);
      }
      detail::gemm(false, false, out_channels, static_cast<int>(ld), patch, T(1), w, patch, col.data(),
                   static_cast<int>(ld), T(0), tmp.data(), static_cast<int>(ld));
      for (int j = 0; j < nb; ++j) {
        for (int o = 0; o < out_channels; ++o) {
          const T* src = tmp.data() + static_cast<std::size_t>(o) * ld + static_cast<std::size_t>(j) * out_area;
          std::copy(src, src + out_area,
                    out->value.data() + (static_cast<std::size_t>(b0 + j) * out_channels + o) * out_area);
        }
      }
    }
  }
  return finish<T>(out, {input.node(), weight.node()},
                   [g, batch, out_channels, patch, out_area, in_area, chunk](Node<T>& self) {
    Node<T>& nx = *self.inputs[0];
    Node<T>& nw = *self.inputs[1];
    std::vector<T> col(nw.requires_grad ? static_cast<std::size_t>(patch) * out_area * chunk : 0);
    std::vector<T> dcol(nx.requires_grad ? static_cast<std::size_t>(patch) * out_area * chunk : 0);
    std::vector<T> gy(static_cast<std::size_t>(out_channels) * out_area * chunk);
    if (nw.requires_grad) nw.ensure_grad();
    if (nx.requires_grad) nx.ensure_grad();
    for (int b0 = 0; b0 < batch; b0 += chunk) {
      const int nb = std::min(chunk, batch - b0);
      const std::size_t ld = static_cast<std::size_t>(nb) * out_area;
      for (int j = 0; j < nb; ++j) {
        for (int o = 0; o < out_channels; ++o) {
          const T* src = self.grad.data() + (static_cast<std::size_t>(b0 + j) * out_channels + o) * out_area;
          std::copy(src, src + out_area, gy.data() + static_cast<std::size_t>(o) * ld + static_cast<std::size_t>(j) * out_area);
        }
      }
      if (nw.requires_grad) {
        for (int j = 0; j < nb; ++j) {
          im2col(nx.value.data() + static_cast<std::size_t>(b0 + j) * in_area, g, col.data(), ld,
                 static_cast<std::size_t>(j) * out_area);
        }
        detail::gemm(false, true, out_channels, patch, static_cast<int>(ld), T(1), gy.data(), static_cast<int>(ld),
                     col.data(), static_cast<int>(ld), T(1), nw.grad.data(), patch);
      }
      if (nx.requires_grad) {
        detail::gemm(true, false, patch, static_cast<int>(ld), out_channels, T(1), nw.value.data(), patch, gy.data(),
                     static_cast<int>(ld), T(0), dcol.data(), static_cast<int>(ld));
        for (int j = 0; j < nb; ++j) {
          col2im_add(dcol.data(), g, nx.grad.data() + static_cast<std::size_t>(b0 + j) * in_area, ld,
                     static_cast<std::size_t>(j) * out_area);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kDiv, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  check_operand(x, "scale");
  auto out = make_output<T>(x.shape(), "scale");
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = xv[i] * factor;
  return finish<T>(out, {x.node()}, [factor](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  check_operand(x, "exp");
  auto out = make_output<T>(x.shape(), "exp");
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::exp(xv[i]);
  require_finite<T>(out->value, "exp output");
  return finish<T>(out, {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  check_operand(x, "log");
  auto out = make_output<T>(x.shape(), "log");
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    if (!(xv[i] > T(0))) throw NumericError("log: non-positive operand");
    out->value[i] = std::log(xv[i]);
  }
  return finish<T>(out, {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] / in.value[i];
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  check_operand(x, "abs");
  auto out = make_output<T>(x.shape(), "abs");
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::abs(xv[i]);
  return finish<T>(out, {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = in.value[i];
      in.grad[i] += v > T(0) ? self.grad[i] : (v < T(0) ? -self.grad[i] : T(0));
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  check_operand(x, "relu");
  auto out = make_output<T>(x.shape(), "relu");
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::max(xv[i], T(0));
  return finish<T>(out, {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    const T* v = in.value.data();
    const T* g = self.grad.data();
    T* gi = in.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += v[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, int axis) {
  check_operand(x, "max_axis");
  axis = normalize_axis(axis, x.rank(), "max_axis");
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = 1;
  auto out = make_output<T>(out_shape, "max_axis");
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(s.outer * s.inner), 0);
  const T* xv = x.values().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      std::int64_t best = 0;
      T best_v = xv[o * s.extent * s.inner + i];
      for (std::int64_t k = 1; k < s.extent; ++k) {
        const T v = xv[(o * s.extent + k) * s.inner + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out->value[static_cast<std::size_t>(o * s.inner + i)] = best_v;
      argmax[static_cast<std::size_t>(o * s.inner + i)] = (o * s.extent + best) * s.inner + i;
    }
  }
  return finish<T>(out, {x.node()}, [argmax = std::move(argmax)](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t j = 0; j < argmax.size(); ++j) in.grad[static_cast<std::size_t>(argmax[j])] += self.grad[j];
  });
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
  return reduce_axis(x, axis, false, "sum_axis");
}
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  return reduce_axis(x, axis, true, "mean_axis");
}
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce_all(x, false, "sum");
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return reduce_all(x, true, "mean");
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int pad) {
  check_operand(x, "pad2d");
  if (x.rank() < 2) throw ShapeError("pad2d: needs two spatial axes, got " + to_string(x.shape()));
  if (pad < 0) throw std::invalid_argument("pad2d: negative padding");
  const std::int64_t h = x.dim(x.rank() - 2);
  const std::int64_t w = x.dim(x.rank() - 1);
  const std::int64_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = h + 2 * pad;
  out_shape[x.rank() - 1] = w + 2 * pad;
  const std::int64_t ph = h + 2 * pad, pw = w + 2 * pad;
  auto out = make_output<T>(out_shape, "pad2d");
  const T* xv = x.values().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t r = 0; r < h; ++r) {
      std::copy_n(xv + (p * h + r) * w, w, out->value.data() + (p * ph + r + pad) * pw + pad);
    }
  }
  return finish<T>(out, {x.node()}, [planes, h, w, ph, pw, pad](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::int64_t p = 0; p < planes; ++p) {
      for (std::int64_t r = 0; r < h; ++r) {
        const T* src = self.grad.data() + (p * ph + r + pad) * pw + pad;
        T* dst = in.grad.data() + (p * h + r) * w;
        for (std::int64_t c = 0; c < w; ++c) dst[c] += src[c];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  check_operand(x, "slice");
  axis = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  auto out = make_output<T>(out_shape, "slice");
  const T* xv = x.values().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv + (o * s.extent + start) * s.inner, length * s.inner, out->value.data() + o * length * s.inner);
  }
  return finish<T>(out, {x.node()}, [s, start, length](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* src = self.grad.data() + o * length * s.inner;
      T* dst = in.grad.data() + (o * s.extent + start) * s.inner;
      for (std::int64_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  for (const auto& p : parts) check_operand(p, "concat");
  axis = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError(shape_pair("concat", b, a));
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) throw ShapeError(shape_pair("concat", parts[0].shape(), p.shape()));
    total += p.dim(static_cast<std::size_t>(axis));
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const AxisSplit s = split_axis(out_shape, axis);
  auto out = make_output<T>(out_shape, "concat");
  std::vector<std::int64_t> extents;
  std::vector<NodePtr<T>> inputs;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t e = p.dim(static_cast<std::size_t>(axis));
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.values().data() + o * e * s.inner, e * s.inner, out->value.data() + (o * total + offset) * s.inner);
    }
    offset += e;
    extents.push_back(e);
    inputs.push_back(p.node());
  }
  return finish<T>(out, std::move(inputs), [s, total, extents](Node<T>& self) {
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      Node<T>& in = *self.inputs[k];
      const std::int64_t e = extents[k];
      if (in.requires_grad) {
        in.ensure_grad();
        for (std::int64_t o = 0; o < s.outer; ++o) {
          const T* src = self.grad.data() + (o * total + offset) * s.inner;
          T* dst = in.grad.data() + o * e * s.inner;
          for (std::int64_t i = 0; i < e * s.inner; ++i) dst[i] += src[i];
        }
      }
      offset += e;
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_operand(x, "reshape");
  if (numel(shape) != x.numel()) throw ShapeError(shape_pair("reshape", x.shape(), shape));
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("reshape: extents must be positive, got " + to_string(shape));
  }
  auto out = make_output<T>(std::move(shape), "reshape");
  out->value = x.node()->value;
  return finish<T>(out, {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride) {
  check_operand(x, "avg_pool2d");
  if (x.rank() != 4) throw ShapeError("avg_pool2d: expected NCHW, got " + to_string(x.shape()));
  if (kernel < 1 || stride < 1) throw std::invalid_argument("avg_pool2d: kernel and stride must be >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  if (kernel > h || kernel > w) throw ShapeError("avg_pool2d: kernel larger than input " + to_string(x.shape()));
  auto out = make_output<T>(Shape{x.dim(0), x.dim(1), oh, ow}, "avg_pool2d");
  const T norm = T(1) / static_cast<T>(kernel * kernel);
  const T* xv = x.values().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t r = 0; r < oh; ++r) {
      for (std::int64_t c = 0; c < ow; ++c) {
        T acc = T(0);
        for (int i = 0; i < kernel; ++i) {
          const T* row = xv + (p * h + r * stride + i) * w + c * stride;
          for (int j = 0; j < kernel; ++j) acc += row[j];
        }
        out->value[static_cast<std::size_t>((p * oh + r) * ow + c)] = acc * norm;
      }
    }
  }
  return finish<T>(out, {x.node()}, [planes, h, w, oh, ow, kernel, stride, norm](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    in.ensure_grad();
    for (std::int64_t p = 0; p < planes; ++p) {
      for (std::int64_t r = 0; r < oh; ++r) {
        for (std::int64_t c = 0; c < ow; ++c) {
          const T g = self.grad[static_cast<std::size_t>((p * oh + r) * ow + c)] * norm;
          for (int i = 0; i < kernel; ++i) {
            T* row = in.grad.data() + (p * h + r * stride + i) * w + c * stride;
            for (int j = 0; j < kernel; ++j) row[j] += g;
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                           std::vector<T>* batch_mean, std::vector<T>* batch_var) {
  check_operand(x, "batch_norm");
  check_operand(gamma, "batch_norm");
  check_operand(beta, "batch_norm");
  const auto l = channel_layout(x, gamma, beta, "batch_norm");
  const std::int64_t count = l.batch * l.inner;
  if (count < 2) {
    throw std::invalid_argument("batch_norm: training mode needs more than one value per channel, got shape " +
                                to_string(x.shape()));
  }
  const T* xv = x.values().data();
  std::vector<T> mean(static_cast<std::size_t>(l.channels), T(0));
  std::vector<T> var(static_cast<std::size_t>(l.channels), T(0));
  for (std::int64_t n = 0; n < l.batch; ++n) {
    for (std::int64_t c = 0; c < l.channels; ++c) {
      const T* src = xv + (n * l.channels + c) * l.inner;
      T acc = T(0);
      for (std::int64_t i = 0; i < l.inner; ++i) acc += src[i];
      mean[static_cast<std::size_t>(c)] += acc;
    }
  }
  for (auto& m : mean) m /= static_cast<T>(count);
  for (std::int64_t n = 0; n < l.batch; ++n) {
    for (std::int64_t c = 0; c < l.channels; ++c) {
      const T* src = xv + (n * l.channels + c) * l.inner;
      const T m = mean[static_cast<std::size_t>(c)];
      T acc = T(0);
      for (std::int64_t i = 0; i < l.inner; ++i) acc += (src[i] - m) * (src[i] - m);
      var[static_cast<std::size_t>(c)] += acc;
    }
  }
  for (auto& v : var) v /= static_cast<T>(count);
  std::vector<T> inv_std(var.size());
  for (std::size_t c = 0; c < var.size(); ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

  auto out = make_output<T>(x.shape(), "batch_norm");
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::int64_t n = 0; n < l.batch; ++n) {
    for (std::int64_t c = 0; c < l.channels; ++c) {
      const std::size_t cc = static_cast<std::size_t>(c);
      const T a = gv[c] * inv_std[cc];
      const T b = bv[c] - mean[cc] * a;
      const T* src = xv + (n * l.channels + c) * l.inner;
      T* dst = out->value.data() + (n * l.channels + c) * l.inner;
      for (std::int64_t i = 0; i < l.inner; ++i) dst[i] = src[i] * a + b;
    }
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return finish<T>(out, {x.node(), gamma.node(), beta.node()}, [l, count, mean, inv_std](Node<T>& self) {
    Node<T>& nx = *self.inputs[0];
    Node<T>& ng = *self.inputs[1];
    Node<T>& nb = *self.inputs[2];
    const std::size_t channels = static_cast<std::size_t>(l.channels);
    std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
    const T* g = self.grad.data();
    const T* xv = nx.value.data();
    for (std::int64_t n = 0; n < l.batch; ++n) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::int64_t base = (n * l.channels + static_cast<std::int64_t>(c)) * l.inner;
        T sg = T(0), sgx = T(0);
        for (std::int64_t i = 0; i < l.inner; ++i) {
          sg += g[base + i];
          sgx += g[base + i] * (xv[base + i] - mean[c]);
        }
        sum_g[c] += sg;
        sum_gx[c] += sgx * inv_std[c];
      }
    }
    if (ng.requires_grad) {
      ng.ensure_grad();
      for (std::size_t c = 0; c < channels; ++c) ng.grad[c] += sum_gx[c];
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t c = 0; c < channels; ++c) nb.grad[c] += sum_g[c];
    }
    if (nx.requires_grad) {
      nx.ensure_grad();
      const T inv_count = T(1) / static_cast<T>(count);
      for (std::int64_t n = 0; n < l.batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          const std::int64_t base = (n * l.channels + static_cast<std::int64_t>(c)) * l.inner;
          const T k = ng.value[c] * inv_std[c];
          const T mg = sum_g[c] * inv_count;
          const T mgx = sum_gx[c] * inv_count;
          for (std::int64_t i = 0; i < l.inner; ++i) {
            const T xhat = (xv[base + i] - mean[c]) * inv_std[c];
            nx.grad[base + i] += k * (g[base + i] - mg - xhat * mgx);
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> batch_norm_fixed(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::span<const T> mean, std::span<const T> var, T eps) {
  check_operand(x, "batch_norm");
  check_operand(gamma, "batch_norm");
  check_operand(beta, "batch_norm");
  const auto l = channel_layout(x, gamma, beta, "batch_norm");
  if (static_cast<std::int64_t>(mean.size()) != l.channels || static_cast<std::int64_t>(var.size()) != l.channels) {
    throw ShapeError("batch_norm: running statistics do not match channels of " + to_string(x.shape()));
  }
  std::vector<T> mu(mean.begin(), mean.end());
  std::vector<T> inv_std(var.size());
  for (std::size_t c = 0; c < var.size(); ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  auto out = make_output<T>(x.shape(), "batch_norm");
  const T* xv = x.values().data();
  for (std::int64_t n = 0; n < l.batch; ++n) {
    for (std::int64_t c = 0; c < l.channels; ++c) {
      const std::size_t cc = static_cast<std::size_t>(c);
      const T a = gamma.values()[cc] * inv_std[cc];
      const T b = beta.values()[cc] - mu[cc] * a;
      const T* src = xv + (n * l.channels + c) * l.inner;
      T* dst = out->value.data() + (n * l.channels + c) * l.inner;
      for (std::int64_t i = 0; i < l.inner; ++i) dst[i] = src[i] * a + b;
    }
  }
  return finish<T>(out, {x.node(), gamma.node(), beta.node()}, [l, mu, inv_std](Node<T>& self) {
    Node<T>& nx = *self.inputs[0];
    Node<T>& ng = *self.inputs[1];
    Node<T>& nb = *self.inputs[2];
    if (nx.requires_grad) nx.ensure_grad();
    if (ng.requires_grad) ng.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    for (std::int64_t n = 0; n < l.batch; ++n) {
      for (std::int64_t c = 0; c < l.channels; ++c) {
        const std::size_t cc = static_cast<std::size_t>(c);
        const std::int64_t base = (n * l.channels + c) * l.inner;
        const T* g = self.grad.data() + base;
        T sg = T(0), sgx = T(0);
        for (std::int64_t i = 0; i < l.inner; ++i) {
          sg += g[i];
          sgx += g[i] * (nx.value[static_cast<std::size_t>(base + i)] - mu[cc]) * inv_std[cc];
        }
        if (nb.requires_grad) nb.grad[cc] += sg;
        if (ng.requires_grad) ng.grad[cc] += sgx;
        if (nx.requires_grad) {
          const T k = ng.value[cc] * inv_std[cc];
          for (std::int64_t i = 0; i < l.inner; ++i) nx.grad[static_cast<std::size_t>(base + i)] += k * g[i];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("log_softmax: expected (B,C), got " + to_string(x.shape()));
  // The max shift is a constant: its total derivative through the result is zero.
  const Tensor<T> shifted = sub(x, max_axis(x, 1).detach());
  return sub(shifted, log(sum_axis(exp(shifted), 1)));
}

#define KDGAN_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> exp(const Tensor<T>&);                                                               \
  template Tensor<T> log(const Tensor<T>&);                                                               \
  template Tensor<T> abs(const Tensor<T>&);                                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                              \
  template Tensor<T> max_axis(const Tensor<T>&, int);                                                     \
  template Tensor<T> sum_axis(const Tensor<T>&, int);                                                     \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                              \
  template Tensor<T> pad2d(const Tensor<T>&, int);                                                        \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> avg_pool2d(const Tensor<T>&, int, int);                                              \
  template Tensor<T> batch_norm_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,            \
                                      std::vector<T>*, std::vector<T>*);                                  \
  template Tensor<T> batch_norm_fixed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                      std::span<const T>, std::span<const T>, T);                         \
  template Tensor<T> log_softmax(const Tensor<T>&);

KDGAN_INSTANTIATE_OPS(float)
KDGAN_INSTANTIATE_OPS(double)

}  // namespace kdgan::ops
