#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kdgan/layers.hpp"
#include "kdgan/tensor.hpp"

namespace kdgan {

// One minibatch of normalized images with their labels and dataset indices.
struct Batch {
  TensorF images;  // (B,3,32,32)
  std::vector<int> labels;
  std::vector<std::int64_t> indices;

  std::size_t size() const { return labels.size(); }
};

// Anything that maps a batch to (B,C) logits: trained networks and the
// stub models used by tests and the stub checkpoints.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual TensorF logits(const Batch& batch, Mode mode, Rng& rng) = 0;
  virtual int num_classes() const = 0;
  virtual std::string describe() const = 0;
};

// Emits `margin` at the true label and 0 elsewhere.
class OracleStub : public Classifier {
 public:
  explicit OracleStub(int num_classes, float margin = 30.0f) : num_classes_(num_classes), margin_(margin) {}
  TensorF logits(const Batch& batch, Mode mode, Rng& rng) override;
  int num_classes() const override { return num_classes_; }
  std::string describe() const override { return "oracle-stub"; }

 private:
  int num_classes_;
  float margin_;
};

// Emits the same row for every image.
class ConstantStub : public Classifier {
 public:
  explicit ConstantStub(std::vector<float> row) : row_(std::move(row)) {}
  TensorF logits(const Batch& batch, Mode mode, Rng& rng) override;
  int num_classes() const override { return static_cast<int>(row_.size()); }
  std::string describe() const override { return "constant-stub"; }

 private:
  std::vector<float> row_;
};

// Row for dataset index i is [i*C, i*C+1, ..., i*C+C-1], so any row of a
// logits cache identifies the image it was computed from.
class IndexSentinelStub : public Classifier {
 public:
  explicit IndexSentinelStub(int num_classes) : num_classes_(num_classes) {}
  TensorF logits(const Batch& batch, Mode mode, Rng& rng) override;
  int num_classes() const override { return num_classes_; }
  std::string describe() const override { return "index-sentinel-stub"; }
  static std::int64_t decode(std::span<const float> row);

 private:
  int num_classes_;
};

}  // namespace kdgan
