#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdgan/architectures.hpp"
#include "kdgan/losses.hpp"
#include "support.hpp"

using namespace kdgan;
using kdgan::testing::Gen;

namespace {

// Parameter count of WRN-d-m written out from the layer list.
std::int64_t wrn_count_oracle(int depth, int widen, int classes) {
  const std::int64_t n = (depth - 4) / 6;
  std::int64_t total = 3 * 16 * 9;
  std::int64_t in = 16;
  for (int group = 0; group < 3; ++group) {
    const std::int64_t out = (16LL << group) * widen;
    for (std::int64_t b = 0; b < n; ++b) {
      const bool project = in != out || (b == 0 && group > 0);
      total += 2 * in + in * out * 9 + 2 * out + out * out * 9 + (project ? in * out : 0);
      in = out;
    }
  }
  return total + 2 * in + in * classes + classes;
}

std::int64_t disc_count_oracle(int depth, int c) {
  const std::int64_t cc = c;
  return 2 * cc + depth * (2 * (2 * cc) + 2 * (cc * cc + cc)) + cc * (cc + 2) + (cc + 2);
}

}  // namespace

TEST_CASE("spec validation names the depth rule") {
  for (int d : {5, 9, 11, 3, 4}) {
    NetworkSpec spec{d, 1, 10};
    try {
      spec.validate();
      FAIL("depth " << d << " accepted");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("6n + 4") != std::string::npos);
    }
  }
  CHECK_NOTHROW(NetworkSpec{10, 1, 10}.validate());
  CHECK_THROWS(NetworkSpec{10, 0, 10}.validate());
  CHECK(NetworkSpec::parse("WRN-16-4", 10).widen == 4);
  CHECK(NetworkSpec::parse("34-2", 100).depth == 34);
  CHECK_THROWS(NetworkSpec::parse("16x4", 10));
}

TEST_CASE("parameter counts match the closed-form layer sum") {
  Gen g(41);
  for (int trial = 0; trial < 8; ++trial) {
    const int depth = 6 * kdgan::testing::random_int(g, 1, 3) + 4;
    const int widen = kdgan::testing::random_int(g, 1, 3);
    const int classes = kdgan::testing::random_int(g, 2, 20);
    auto net = build_wrn<float>({depth, widen, classes}, 1);
    CHECK(count_parameters(*net) == wrn_count_oracle(depth, widen, classes));
  }
  for (int depth = 1; depth <= 4; ++depth) {
    auto d = build_discriminator<float>({depth, 10}, 1);
    CHECK(count_parameters(*d) == disc_count_oracle(depth, 10));
  }
}

TEST_CASE("parameter counts agree with the published sizes") {
  const struct {
    int depth, widen;
    double millions;
  } rows[] = {{10, 2, 0.32}, {10, 4, 1.22}, {34, 4, 7.42}, {40, 10, 55.9}};
  for (const auto& r : rows) {
    const auto t0 = std::chrono::steady_clock::now();
    auto net = build_wrn<float>({r.depth, r.widen, 100}, 3);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double m = static_cast<double>(count_parameters(*net)) / 1e6;
    CAPTURE(r.depth);
    CAPTURE(m);
    CHECK(std::abs(m - r.millions) / r.millions < 0.02);
    CHECK(seconds < 10.0);
  }
}

TEST_CASE("fully connected 64 to 100 has 6500 parameters") {
  Rng init(1);
  Linear<float> fc(64, 100, init);
  ParameterSet<float> p;
  fc.collect("fc", p);
  CHECK(count_parameters(p) == 6500);
}

TEST_CASE("count is independent of parameter values") {
  auto a = build_wrn<float>({10, 1, 10}, 1);
  auto b = build_wrn<float>({10, 1, 10}, 2);
  CHECK(count_parameters(*a) == count_parameters(*b));
}

TEST_CASE("wrn output shapes and spatial halving") {
  Gen g(42);
  for (int widen : {1, 2}) {
    auto net = build_wrn<float>({10, widen, 10}, 5);
    Rng rng(1);
    const TensorF y = net->forward(kdgan::testing::random_tensor_f(g, {2, 3, 32, 32}), Mode::kTrain, rng);
    CHECK(y.shape() == Shape{2, 10});
    REQUIRE(net->blocks().size() == 3);
    CHECK(net->blocks()[0].spec().stride == 1);
    CHECK(net->blocks()[1].spec().stride == 2);
    CHECK(net->blocks()[2].spec().stride == 2);
    CHECK(net->blocks()[2].spec().out_channels == 64 * widen);
  }
  auto deep = build_wrn<double>({16, 1, 7}, 5);
  CHECK(deep->blocks().size() == 6);
  CHECK(deep->blocks()[3].spec().stride == 1);
}

TEST_CASE("discriminator output is C+2 wide and both slices normalize") {
  Gen g(43);
  for (int depth = 1; depth <= 4; ++depth) {
    const int c = depth == 3 ? 100 : 10;
    auto d = build_discriminator<double>({depth, c}, 7);
    Rng rng(2);
    const TensorD y = d->forward(kdgan::testing::random_tensor(g, {8, c}, 3.0, false), Mode::kTrain, rng);
    CHECK(y.shape() == Shape{8, c + 2});
    const TensorD labels = generalized_softmax(label_scores(y, c), Temperature(1.0));
    const TensorD rf = generalized_softmax(real_fake_scores(y, c), Temperature(1.0));
    CHECK(labels.shape() == Shape{8, c});
    CHECK(rf.shape() == Shape{8, 2});
    for (int i = 0; i < 8; ++i) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += labels.at(i * c + j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(rf.at(2 * i) + rf.at(2 * i + 1) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  CHECK_THROWS(build_discriminator<float>({0, 10}, 1));
}

TEST_CASE("same seed builds the same network in float and double") {
  auto a = build_wrn<float>({10, 1, 10}, 11);
  auto b = build_wrn<double>({10, 1, 10}, 11);
  const auto pa = a->parameters();
  const auto pb = b->parameters();
  REQUIRE(pa.trainable.size() == pb.trainable.size());
  for (std::size_t i = 0; i < pa.trainable.size(); ++i) {
    CHECK(pa.trainable[i].name == pb.trainable[i].name);
    const auto va = pa.trainable[i].tensor.values();
    const auto vb = pb.trainable[i].tensor.values();
    for (std::size_t k = 0; k < va.size(); ++k) CHECK(va[k] == static_cast<float>(vb[k]));
  }
}

TEST_CASE("checkpoint round trip restores identical eval outputs") {
  const auto dir = kdgan::testing::scratch_dir("ckpt");
  auto net = build_wrn<float>({10, 1, 10}, 21);
  Gen g(44);
  Rng rng(1);
  const TensorF x = kdgan::testing::random_tensor_f(g, {4, 3, 32, 32});
  net->forward(x, Mode::kTrain, rng);  // move the running statistics off their defaults
  const TensorF before = net->forward(x, Mode::kEval, rng);
  const std::string path = dir + "/net.ckpt";
  save_checkpoint(path, make_checkpoint(*net));

  auto classifier = load_classifier(path);
  CHECK(classifier->describe() == "WRN-10-1");
  Batch batch{x, {0, 1, 2, 3}, {0, 1, 2, 3}};
  const TensorF after = classifier->logits(batch, Mode::kEval, rng);
  for (std::int64_t i = 0; i < before.numel(); ++i) CHECK(after.at(i) == before.at(i));

  const Checkpoint ckpt = load_checkpoint(path);
  CHECK(spec_from_header(ckpt.header).name() == "WRN-10-1");
  auto other = build_wrn<float>({10, 2, 10}, 1);
  CHECK_THROWS(restore_parameters(ckpt, *other));
}

TEST_CASE("checkpoint loader rejects damaged files") {
  const auto dir = kdgan::testing::scratch_dir("ckpt_bad");
  auto net = build_wrn<float>({10, 1, 10}, 1);
  const std::string path = dir + "/net.ckpt";
  save_checkpoint(path, make_checkpoint(*net));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 7);
  CHECK_THROWS(load_checkpoint(path));
  std::ofstream(dir + "/junk.ckpt") << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(dir + "/junk.ckpt"));
  CHECK_THROWS(load_checkpoint(dir + "/missing.ckpt"));
}
