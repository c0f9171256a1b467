#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdgan/classifier.hpp"
#include "kdgan/layers.hpp"

namespace kdgan {

inline constexpr int kImageChannels = 3;
inline constexpr int kImageSide = 32;
inline constexpr int kImageSize = kImageChannels * kImageSide * kImageSide;

enum class CifarVariant { kCifar10, kCifar100 };

struct LabeledImage {
  std::vector<float> pixels;  // 3x32x32, channel-major, normalized
  int label = 0;
  std::int64_t index = 0;
};

// Images are held at raw scale (CIFAR bytes / 255, or synthetic values);
// image() and make_batch() apply the per-channel normalization, which is
// always taken from the training split.
struct Dataset {
  std::string name;
  int num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::uint8_t> coarse_labels;  // CIFAR-100 only
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> stddev{1.0f, 1.0f, 1.0f};

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  LabeledImage image(std::int64_t index) const;
  // First `count` images, keeping normalization.
  Dataset head(std::int64_t count) const;
  // Sets mean/stddev from this dataset's own pixels.
  void compute_normalization();
  void copy_normalization(const Dataset& train) {
    mean = train.mean;
    stddev = train.stddev;
  }
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

// Standard binary layout: CIFAR-10 records are 1 label byte + 3072 pixel
// bytes; CIFAR-100 records are coarse label, fine label, 3072 pixel bytes.
Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& name);
Dataset load_cifar_file(const std::string& path, CifarVariant variant);
std::vector<std::uint8_t> serialize_cifar(const Dataset& data, CifarVariant variant);
// Reads the standard file names (data_batch_1..5.bin/test_batch.bin, or
// train.bin/test.bin) from `dir` or its usual extracted subdirectory.
DataSplits load_cifar(const std::string& dir, CifarVariant variant);

struct AugmentConfig {
  bool flip = true;
  int pad = 4;
  int crop = kImageSide;

  void validate() const;
};

struct CropOffset {
  int row = 0;
  int col = 0;
};

CropOffset draw_crop_offset(const AugmentConfig& cfg, Rng& rng);
void flip_horizontal(std::span<float> pixels);

// Mirror with probability 1/2, zero-pad by cfg.pad, take a uniform random
// crop. The label and index are unchanged.
LabeledImage augment(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng);

// Class-structured images of mirrored Gaussian blobs. The blob layout of each
// class depends only on num_classes; `seed` drives everything else.
// difficulty in [0,1] scales translation, contrast, distractor blobs taken
// from other classes, and pixel noise. At 0 each image is its class
// prototype plus faint noise.
Dataset make_synthetic(std::int64_t n, int num_classes, double difficulty, std::uint64_t seed);

// Stacks images into a (B,3,32,32) batch, augmenting when cfg is given.
Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices, const AugmentConfig* cfg, Rng* rng);

// Seeded permutation of [0, n) for one epoch; a pure function of its inputs.
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, int epoch);

// Splits an epoch order into minibatches; the last partial batch is kept,
// except that a single leftover image joins the previous batch.
std::vector<std::vector<std::int64_t>> minibatches(const std::vector<std::int64_t>& order, int batch_size);

// ---- teacher logits cache ----------------------------------------------------

struct TeacherLogitsStore {
  int num_classes = 0;
  std::int64_t size = 0;
  std::vector<float> rows;  // size x num_classes, row i belongs to dataset index i
  std::string provenance;

  std::span<const float> row(std::int64_t index) const;
  // Rows for the given dataset indices as a (B,C) tensor.
  TensorF gather(std::span<const std::int64_t> indices) const;
  // Throws if the store cannot be aligned with `data`.
  void check_aligned(const Dataset& data) const;
};

// File layout (little endian):
//   "KDLOGITS" | u32 version=1 | u64 N | u32 C | N*C float32 row-major | u32 CRC-32 of the float payload
// Provenance is written to "<path>.provenance" as plain text.
void save_logits_store(const std::string& path, const TeacherLogitsStore& store);
TeacherLogitsStore load_logits_store(const std::string& path);
std::vector<std::uint8_t> encode_logits_store(const TeacherLogitsStore& store);
TeacherLogitsStore decode_logits_store(const std::vector<std::uint8_t>& bytes, const std::string& what);

// Eval-mode forward of every un-augmented image.
TeacherLogitsStore export_teacher_logits(Classifier& teacher, const Dataset& data, int batch_size,
                                         const std::string& provenance);

}  // namespace kdgan
