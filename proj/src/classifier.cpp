#include "kdgan/classifier.hpp"

#include <cmath>

namespace kdgan {

TensorF OracleStub::logits(const Batch& batch, Mode, Rng&) {
  const auto b = static_cast<std::int64_t>(batch.size());
  std::vector<float> values(static_cast<std::size_t>(b * num_classes_), 0.0f);
  for (std::int64_t i = 0; i < b; ++i) {
    values[static_cast<std::size_t>(i * num_classes_ + batch.labels[static_cast<std::size_t>(i)])] = margin_;
  }
  return TensorF::from(Shape{b, num_classes_}, std::move(values));
}

TensorF ConstantStub::logits(const Batch& batch, Mode, Rng&) {
  const auto b = static_cast<std::int64_t>(batch.size());
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(b) * row_.size());
  for (std::int64_t i = 0; i < b; ++i) values.insert(values.end(), row_.begin(), row_.end());
  return TensorF::from(Shape{b, static_cast<std::int64_t>(row_.size())}, std::move(values));
}

TensorF IndexSentinelStub::logits(const Batch& batch, Mode, Rng&) {
  const auto b = static_cast<std::int64_t>(batch.size());
  std::vector<float> values(static_cast<std::size_t>(b * num_classes_));
  for (std::int64_t i = 0; i < b; ++i) {
    const std::int64_t index = batch.indices[static_cast<std::size_t>(i)];
    for (int j = 0; j < num_classes_; ++j) {
      values[static_cast<std::size_t>(i * num_classes_ + j)] = static_cast<float>(index * num_classes_ + j);
    }
  }
  return TensorF::from(Shape{b, num_classes_}, std::move(values));
}

std::int64_t IndexSentinelStub::decode(std::span<const float> row) {
  return static_cast<std::int64_t>(std::llround(row[0])) / static_cast<std::int64_t>(row.size());
}

}  // namespace kdgan
