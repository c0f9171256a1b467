#pragma once

// Seeded generators and small helpers shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kdgan/tensor.hpp"

namespace kdgan::testing {

using Gen = std::mt19937_64;

inline std::vector<double> normal_values(Gen& g, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

inline TensorD random_tensor(Gen& g, const Shape& shape, double sigma = 1.0, bool requires_grad = true) {
  return TensorD::from(shape, normal_values(g, static_cast<std::size_t>(numel(shape)), sigma), requires_grad);
}

inline TensorF random_tensor_f(Gen& g, const Shape& shape, double sigma = 1.0, bool requires_grad = false) {
  auto v = normal_values(g, static_cast<std::size_t>(numel(shape)), sigma);
  return TensorF::from(shape, std::vector<float>(v.begin(), v.end()), requires_grad);
}

inline std::vector<int> random_labels(Gen& g, std::size_t n, int classes) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

inline int random_int(Gen& g, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); }

// Fresh empty directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("kdgan_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::string read_text(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return {};
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

}  // namespace kdgan::testing
