#include <doctest.h>

#include <cmath>

#include "kdgan/gradcheck.hpp"
#include "kdgan/ops.hpp"
#include "support.hpp"

using namespace kdgan;
using kdgan::testing::Gen;
using kdgan::testing::random_tensor;

namespace {

// Direct seven-loop convolution in double.
std::vector<double> naive_conv(const TensorD& x, const TensorD& w, int stride, int pad) {
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto o = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(b * o * oh * ow), 0.0);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t co = 0; co < o; ++co)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const auto iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x.at(((n * c + ci) * h + iy) * wd + ix) * w.at(((co * c + ci) * k + ky) * k + kx);
              }
          out[static_cast<std::size_t>(((n * o + co) * oh + y) * ow + xx)] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor construction validates shapes") {
  CHECK_THROWS_AS(TensorF::from({2, 3}, std::vector<float>(5)), ShapeError);
  CHECK_THROWS_AS(TensorF::zeros({2, 0}), ShapeError);
  const TensorF t = TensorF::full({2, 2}, 3.0f);
  CHECK(t.numel() == 4);
  CHECK(t.at(3) == 3.0f);
  CHECK(TensorF::scalar(2.5f).item() == 2.5f);
}

TEST_CASE("backward accumulates into leaves across calls") {
  TensorD x = TensorD::from({3}, {1.0, 2.0, 3.0}, true);
  ops::sum(ops::mul(x, x)).backward();
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  ops::sum(ops::mul(x, x)).backward();
  CHECK(x.grad()[1] == doctest::Approx(8.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward through a shared subexpression sums both paths") {
  TensorD x = TensorD::from({1}, {3.0}, true);
  const TensorD y = ops::exp(x);
  ops::sum(ops::add(y, ops::mul(y, y))).backward();
  const double e = std::exp(3.0);
  CHECK(x.grad()[0] == doctest::Approx(e + 2 * e * e));
}

TEST_CASE("backward requires a scalar root that needs a gradient") {
  TensorD x = TensorD::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(ops::exp(x).backward(), ShapeError);
  CHECK_THROWS(ops::sum(TensorD::from({2}, {1.0, 2.0})).backward());
}

TEST_CASE("no-grad guard records no graph") {
  TensorD x = TensorD::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(ops::exp(x).requires_grad());
  }
  CHECK(ops::exp(x).requires_grad());
}

TEST_CASE("broadcasting follows numpy rules") {
  const TensorD a = TensorD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const TensorD row = TensorD::from({3}, {10, 20, 30});
  const TensorD col = TensorD::from({2, 1}, {100, 200});
  const TensorD r = ops::add(a, row);
  CHECK(r.at(4) == 25.0);
  const TensorD c = ops::add(a, col);
  CHECK(c.at(4) == 205.0);
  CHECK_THROWS_AS(ops::add(a, TensorD::from({2}, {1, 2})), ShapeError);
}

TEST_CASE("shape errors name both operands") {
  const TensorD a = TensorD::zeros({2, 3});
  const TensorD b = TensorD::zeros({4, 5});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,5)") != std::string::npos);
  }
}

TEST_CASE("non-finite operands are rejected") {
  const TensorD bad = TensorD::from({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(ops::exp(bad), NumericError);
  CHECK_THROWS_AS(ops::log(TensorD::from({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(ops::log(TensorD::from({1}, {-1.0})), NumericError);
}

TEST_CASE("conv2d matches a direct convolution") {
  Gen g(11);
  for (int trial = 0; trial < 12; ++trial) {
    const int stride = 1 + trial % 2;
    const int k = trial % 3 == 0 ? 1 : 3;
    const int pad = k == 3 ? 1 : 0;
    const int c = kdgan::testing::random_int(g, 1, 4), o = kdgan::testing::random_int(g, 1, 5);
    const int h = kdgan::testing::random_int(g, 3, 9), b = kdgan::testing::random_int(g, 1, 3);
    const TensorD x = random_tensor(g, {b, c, h, h + 1}, 1.0, false);
    const TensorD w = random_tensor(g, {o, c, k, k}, 1.0, false);
    const TensorD y = ops::conv2d(x, w, stride, pad);
    const auto ref = naive_conv(x, w, stride, pad);
    REQUIRE(static_cast<std::size_t>(y.numel()) == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Gen g(12);
  for (int trial = 0; trial < 4; ++trial) {
    const int stride = 1 + trial % 2;
    TensorD x = random_tensor(g, {2, 2, 5, 5});
    TensorD w = random_tensor(g, {3, 2, 3, 3});
    const TensorD probe = random_tensor(g, {2, 3, stride == 1 ? 5 : 3, stride == 1 ? 5 : 3}, 1.0, false);
    const double err = gradient_check_leaves([&] { return ops::sum(ops::mul(ops::conv2d(x, w, stride, 1), probe)); },
                                             {x, w});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("log_softmax is stable for large logits") {
  const TensorD x = TensorD::from({1, 3}, {1000.0, 1001.0, 1002.0});
  const TensorD y = ops::log_softmax(x);
  const double norm = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  CHECK(y.at(2) == doctest::Approx(-norm));
  CHECK(y.at(0) == doctest::Approx(-2.0 - norm));
}

TEST_CASE("batch_norm_train rejects a single value per channel") {
  const TensorD x = TensorD::from({1, 2}, {1.0, 2.0});
  const TensorD gamma = TensorD::full({2}, 1.0), beta = TensorD::zeros({2});
  CHECK_THROWS(ops::batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr));
}

TEST_CASE("batch_norm_train output has zero mean and unit variance per channel") {
  Gen g(13);
  const TensorD x = random_tensor(g, {6, 3, 2, 2}, 3.0, false);
  const TensorD gamma = TensorD::full({3}, 1.0), beta = TensorD::zeros({3});
  std::vector<double> mean, var;
  const TensorD y = ops::batch_norm_train(x, gamma, beta, 0.0, &mean, &var);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, sq = 0.0;
    for (int n = 0; n < 6; ++n)
      for (int i = 0; i < 4; ++i) {
        const double v = y.at((n * 3 + c) * 4 + i);
        s += v;
        sq += v * v;
      }
    CHECK(s / 24 == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(sq / 24 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("slice and concat invert each other") {
  Gen g(14);
  const TensorD x = random_tensor(g, {4, 3}, 1.0, false);
  const TensorD back = ops::concat<double>({ops::slice(x, 0, 0, 1), ops::slice(x, 0, 1, 3)}, 0);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.at(i) == x.at(i));
  CHECK_THROWS_AS(ops::slice(x, 0, 3, 2), ShapeError);
}
