#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "kdgan/data.hpp"
#include "support.hpp"

using namespace kdgan;
using kdgan::testing::Gen;

namespace {

std::vector<std::uint8_t> fixture_bytes(CifarVariant variant, int records, std::uint64_t seed) {
  Gen g(seed);
  std::vector<std::uint8_t> bytes;
  for (int r = 0; r < records; ++r) {
    if (variant == CifarVariant::kCifar100) bytes.push_back(static_cast<std::uint8_t>(g() % 20));
    bytes.push_back(static_cast<std::uint8_t>(g() % (variant == CifarVariant::kCifar10 ? 10 : 100)));
    for (int k = 0; k < kImageSize; ++k) bytes.push_back(static_cast<std::uint8_t>(g() & 0xff));
  }
  return bytes;
}

// Multinomial logistic regression by full-batch gradient descent.
double linear_probe_error(const Dataset& train, const Dataset& test, int iterations) {
  const int c = train.num_classes;
  std::vector<double> w(static_cast<std::size_t>(kImageSize * c), 0.0), b(static_cast<std::size_t>(c), 0.0);
  auto scores = [&](const LabeledImage& img) {
    std::vector<double> s(b);
    for (int k = 0; k < kImageSize; ++k)
      for (int j = 0; j < c; ++j) s[j] += img.pixels[k] * w[k * c + j];
    return s;
  };
  std::vector<LabeledImage> images;
  for (std::int64_t i = 0; i < train.size(); ++i) images.push_back(train.image(i));
  const double lr = 0.5 / kImageSize;
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> gw(w.size(), 0.0), gb(b.size(), 0.0);
    for (const auto& img : images) {
      auto s = scores(img);
      const double m = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (auto& v : s) z += v = std::exp(v - m);
      for (int j = 0; j < c; ++j) {
        const double d = s[j] / z - (j == img.label ? 1.0 : 0.0);
        gb[j] += d;
        for (int k = 0; k < kImageSize; ++k) gw[k * c + j] += d * img.pixels[k];
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * gw[k] / static_cast<double>(images.size()) * kImageSize;
    for (int j = 0; j < c; ++j) b[j] -= 0.5 * gb[j] / static_cast<double>(images.size());
  }
  int wrong = 0;
  for (std::int64_t i = 0; i < test.size(); ++i) {
    const auto img = test.image(i);
    const auto s = scores(img);
    wrong += static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()) != img.label;
  }
  return 100.0 * wrong / static_cast<double>(test.size());
}

}  // namespace

TEST_CASE("cifar fixtures round trip bit-exactly") {
  for (auto variant : {CifarVariant::kCifar10, CifarVariant::kCifar100}) {
    const auto bytes = fixture_bytes(variant, 2, 81);
    const Dataset d = parse_cifar(bytes, variant, "fixture");
    REQUIRE(d.size() == 2);
    const std::size_t label_at = variant == CifarVariant::kCifar10 ? 0 : 1;
    CHECK(d.labels[0] == bytes[label_at]);
    CHECK(d.pixels[5] == static_cast<float>(bytes[label_at + 1 + 5]) / 255.0f);
    CHECK(serialize_cifar(d, variant) == bytes);
  }
}

TEST_CASE("cifar files on disk load through the directory loader") {
  const auto dir = kdgan::testing::scratch_dir("cifar");
  const auto sub = std::filesystem::path(dir) / "cifar-10-batches-bin";
  std::filesystem::create_directories(sub);
  for (int i = 1; i <= 5; ++i) {
    const auto bytes = fixture_bytes(CifarVariant::kCifar10, 3, 90 + i);
    std::ofstream(sub / ("data_batch_" + std::to_string(i) + ".bin"), std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  const auto test_bytes = fixture_bytes(CifarVariant::kCifar10, 4, 99);
  std::ofstream(sub / "test_batch.bin", std::ios::binary)
      .write(reinterpret_cast<const char*>(test_bytes.data()), static_cast<std::streamsize>(test_bytes.size()));
  const DataSplits splits = load_cifar(dir, CifarVariant::kCifar10);
  CHECK(splits.train.size() == 15);
  CHECK(splits.test.size() == 4);
  CHECK(splits.test.mean == splits.train.mean);
  CHECK_THROWS(load_cifar(dir + "/nowhere", CifarVariant::kCifar10));
}

TEST_CASE("truncated cifar input reports the record offset") {
  auto bytes = fixture_bytes(CifarVariant::kCifar10, 3, 82);
  bytes.resize(bytes.size() - 10);
  try {
    parse_cifar(bytes, CifarVariant::kCifar10, "short.bin");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("offset 6146") != std::string::npos);
  }
}

TEST_CASE("cifar labels outside the class range are rejected") {
  auto bytes = fixture_bytes(CifarVariant::kCifar10, 1, 83);
  bytes[0] = 10;
  CHECK_THROWS(parse_cifar(bytes, CifarVariant::kCifar10, "bad"));
}

TEST_CASE("augmentation keeps label, index and shape") {
  const Dataset d = make_synthetic(20, 10, 0.5, 3);
  Rng rng(84);
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const LabeledImage img = d.image(i);
    const LabeledImage out = augment(img, {}, rng);
    CHECK(out.label == img.label);
    CHECK(out.index == i);
    CHECK(out.pixels.size() == img.pixels.size());
  }
}

TEST_CASE("augmentation with everything off is the identity") {
  const Dataset d = make_synthetic(3, 10, 0.5, 4);
  Rng rng(85);
  const LabeledImage img = d.image(1);
  CHECK(augment(img, {false, 0, 32}, rng).pixels == img.pixels);
}

TEST_CASE("horizontal flip is an involution") {
  Gen g(86);
  auto v = kdgan::testing::normal_values(g, kImageSize);
  std::vector<float> pixels(v.begin(), v.end());
  const auto original = pixels;
  flip_horizontal(pixels);
  CHECK(pixels != original);
  CHECK(pixels[31] == original[0]);
  flip_horizontal(pixels);
  CHECK(pixels == original);
}

TEST_CASE("crop offsets are uniform over the padded range") {
  Rng rng(87);
  const AugmentConfig cfg{true, 4, 32};
  std::vector<int> counts(81, 0);
  const int draws = 81 * 200;
  for (int i = 0; i < draws; ++i) {
    const CropOffset off = draw_crop_offset(cfg, rng);
    REQUIRE(off.row >= 0);
    REQUIRE(off.row <= 8);
    REQUIRE(off.col >= 0);
    REQUIRE(off.col <= 8);
    ++counts[static_cast<std::size_t>(off.row * 9 + off.col)];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 200.0) * (c - 200.0) / 200.0;
  CHECK(chi2 < 124.0);  // 99.9th percentile of chi-square with 80 dof
}

TEST_CASE("augmentation config validation") {
  CHECK_THROWS(AugmentConfig{true, -1, 32}.validate());
  CHECK_THROWS(AugmentConfig{true, 2, 37}.validate());
  const Dataset d = make_synthetic(4, 10, 0.5, 1);
  const std::vector<std::int64_t> idx{0, 1};
  const AugmentConfig cfg;
  CHECK_THROWS(make_batch(d, idx, &cfg, nullptr));
  const AugmentConfig small{true, 4, 24};
  Rng rng(1);
  CHECK_THROWS(make_batch(d, idx, &small, &rng));
}

TEST_CASE("synthetic data is deterministic per seed") {
  const Dataset a = make_synthetic(50, 10, 0.7, 11);
  const Dataset b = make_synthetic(50, 10, 0.7, 11);
  const Dataset c = make_synthetic(50, 10, 0.7, 12);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  CHECK(a.pixels != c.pixels);
  CHECK_THROWS(make_synthetic(0, 10, 0.5, 1));
  CHECK_THROWS(make_synthetic(5, 10, 1.5, 1));
}

TEST_CASE("synthetic labels are uniform over classes") {
  const Dataset d = make_synthetic(5000, 10, 0.5, 13);
  std::vector<int> counts(10, 0);
  for (int l : d.labels) ++counts[static_cast<std::size_t>(l)];
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 500.0) * (c - 500.0) / 500.0;
  CHECK(chi2 < 27.9);  // 99.9th percentile, 9 dof
}

TEST_CASE("normalization comes from the training split") {
  const Dataset train = make_synthetic(200, 10, 0.5, 14);
  double sum = 0.0, sq = 0.0;
  for (std::int64_t i = 0; i < train.size(); ++i) {
    const auto img = train.image(i);
    for (int k = 0; k < 1024; ++k) {
      sum += img.pixels[k];
      sq += img.pixels[k] * img.pixels[k];
    }
  }
  const double n = 200.0 * 1024;
  CHECK(sum / n == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("a linear probe separates difficulty-0 synthetic data") {
  Dataset train = make_synthetic(200, 10, 0.0, 15);
  Dataset test = make_synthetic(200, 10, 0.0, 16);
  test.copy_normalization(train);
  CHECK(linear_probe_error(train, test, 30) < 5.0);
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(100, 5, 0), b = epoch_order(100, 5, 0), c = epoch_order(100, 5, 1);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("minibatches cover the order and merge a lone leftover") {
  std::vector<std::int64_t> order(10);
  for (int i = 0; i < 10; ++i) order[i] = 9 - i;
  auto batches = minibatches(order, 3);
  REQUIRE(batches.size() == 3);
  CHECK(batches.back().size() == 4);
  batches = minibatches(order, 4);
  REQUIRE(batches.size() == 3);
  CHECK(batches.back().size() == 2);
  std::vector<std::int64_t> flat;
  for (const auto& b : batches) flat.insert(flat.end(), b.begin(), b.end());
  CHECK(flat == order);
  CHECK_THROWS(minibatches(order, 0));
}

TEST_CASE("logits store round trips with its checksum") {
  const auto dir = kdgan::testing::scratch_dir("store");
  Gen g(88);
  TeacherLogitsStore store;
  store.num_classes = 10;
  store.size = 37;
  for (double v : kdgan::testing::normal_values(g, 370, 5.0)) store.rows.push_back(static_cast<float>(v));
  store.provenance = "test";
  const std::string path = dir + "/t.logits";
  save_logits_store(path, store);
  CHECK(std::filesystem::file_size(path) == 8 + 4 + 8 + 4 + 370 * 4 + 4);
  CHECK(std::filesystem::exists(path + ".provenance"));
  const TeacherLogitsStore back = load_logits_store(path);
  CHECK(back.size == 37);
  CHECK(back.num_classes == 10);
  CHECK(std::memcmp(back.rows.data(), store.rows.data(), store.rows.size() * sizeof(float)) == 0);
  CHECK(back.provenance == "test");

  auto bytes = encode_logits_store(store);
  bytes[30] ^= 0x01;
  try {
    decode_logits_store(bytes, "flipped");
    FAIL("expected checksum failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
  auto longer = encode_logits_store(store);
  longer.push_back(0);
  CHECK_THROWS(decode_logits_store(longer, "long"));
  auto shorter = encode_logits_store(store);
  shorter.resize(shorter.size() - 9);
  CHECK_THROWS(decode_logits_store(shorter, "short"));
}

TEST_CASE("misaligned logits stores are rejected") {
  const Dataset d = make_synthetic(12, 10, 0.5, 17);
  TeacherLogitsStore store;
  store.num_classes = 10;
  store.size = 11;
  store.rows.assign(110, 0.0f);
  CHECK_THROWS(store.check_aligned(d));
  store.size = 12;
  store.rows.assign(120, 0.0f);
  CHECK_NOTHROW(store.check_aligned(d));
  store.num_classes = 12;
  store.size = 10;
  CHECK_THROWS(store.check_aligned(d));
}

TEST_CASE("gathered store rows line up with sampled image indices") {
  const Dataset d = make_synthetic(300, 10, 0.5, 18);
  IndexSentinelStub stub(10);
  const TeacherLogitsStore store = export_teacher_logits(stub, d, 64, "sentinel");
  store.check_aligned(d);
  Rng rng(89);
  const AugmentConfig cfg;
  for (int epoch = 0; epoch < 3; ++epoch) {
    for (const auto& idx : minibatches(epoch_order(d.size(), 9, epoch), 32)) {
      const Batch batch = make_batch(d, idx, &cfg, &rng);
      const TensorF rows = store.gather(batch.indices);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto row = rows.values().subspan(i * 10, 10);
        CHECK(IndexSentinelStub::decode(row) == batch.indices[i]);
      }
    }
  }
}

TEST_CASE("exported rows reproduce stub outputs") {
  const Dataset d = make_synthetic(40, 10, 0.5, 19);
  ConstantStub constant(std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  const auto store = export_teacher_logits(constant, d, 16, "c");
  for (std::int64_t i = 0; i < 40; ++i) CHECK(store.row(i)[3] == 4.0f);
  OracleStub oracle(10);
  const auto o = export_teacher_logits(oracle, d, 7, "o");
  for (std::int64_t i = 0; i < 40; ++i) CHECK(o.row(i)[static_cast<std::size_t>(d.labels[i])] == 30.0f);
  OracleStub wrong(7);
  CHECK_THROWS(export_teacher_logits(wrong, d, 7, "w"));
}
