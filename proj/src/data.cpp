#include "kdgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <boost/crc.hpp>

#include "binary_io.hpp"

namespace kdgan {

namespace fs = std::filesystem;

LabeledImage Dataset::image(std::int64_t index) const {
  if (index < 0 || index >= size()) throw std::out_of_range("dataset index " + std::to_string(index) + " out of range");
  LabeledImage img;
  img.label = labels[static_cast<std::size_t>(index)];
  img.index = index;
  img.pixels.resize(kImageSize);
  const float* src = pixels.data() + index * kImageSize;
  constexpr int plane = kImageSide * kImageSide;
  for (int c = 0; c < kImageChannels; ++c) {
    const float inv = 1.0f / stddev[static_cast<std::size_t>(c)];
    const float mu = mean[static_cast<std::size_t>(c)];
    for (int i = 0; i < plane; ++i) img.pixels[static_cast<std::size_t>(c * plane + i)] = (src[c * plane + i] - mu) * inv;
  }
  return img;
}

Dataset Dataset::head(std::int64_t count) const {
  if (count < 0 || count > size()) throw std::out_of_range("dataset head: count exceeds dataset size");
  Dataset out;
  out.name = name;
  out.num_classes = num_classes;
  out.pixels.assign(pixels.begin(), pixels.begin() + count * kImageSize);
  out.labels.assign(labels.begin(), labels.begin() + count);
  if (!coarse_labels.empty()) out.coarse_labels.assign(coarse_labels.begin(), coarse_labels.begin() + count);
  out.mean = mean;
  out.stddev = stddev;
  return out;
}

void Dataset::compute_normalization() {
  constexpr int plane = kImageSide * kImageSide;
  const std::int64_t n = size();
  if (n == 0) throw std::invalid_argument("cannot normalize an empty dataset");
  for (int c = 0; c < kImageChannels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const float* p = pixels.data() + i * kImageSize + c * plane;
      for (int k = 0; k < plane; ++k) {
        sum += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n) * plane;
    const double mu = sum / count;
    const double var = std::max(sq / count - mu * mu, 1e-12);
    mean[static_cast<std::size_t>(c)] = static_cast<float>(mu);
    stddev[static_cast<std::size_t>(c)] = static_cast<float>(std::sqrt(var));
  }
}

// ---- CIFAR binary -------------------------------------------------------------

namespace {

int record_size(CifarVariant v) { return v == CifarVariant::kCifar10 ? 3073 : 3074; }
int class_count(CifarVariant v) { return v == CifarVariant::kCifar10 ? 10 : 100; }

}  // namespace

Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& name) {
  const std::size_t record = static_cast<std::size_t>(record_size(variant));
  const std::size_t label_bytes = record - kImageSize;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % record;
    throw std::runtime_error(name + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                             std::to_string(bytes.size() % record) + " of " + std::to_string(record) + " bytes)");
  }
  Dataset data;
  data.name = name;
  data.num_classes = class_count(variant);
  const std::size_t n = bytes.size() / record;
  data.pixels.resize(n * kImageSize);
  data.labels.resize(n);
  if (variant == CifarVariant::kCifar100) data.coarse_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const int label = rec[label_bytes - 1];
    if (label >= data.num_classes) {
      throw std::runtime_error(name + ": label " + std::to_string(label) + " >= " + std::to_string(data.num_classes) +
                               " at byte offset " + std::to_string(i * record + label_bytes - 1));
    }
    data.labels[i] = label;
    if (variant == CifarVariant::kCifar100) data.coarse_labels[i] = rec[0];
    float* dst = data.pixels.data() + i * kImageSize;
    for (int k = 0; k < kImageSize; ++k) dst[k] = static_cast<float>(rec[label_bytes + static_cast<std::size_t>(k)]) / 255.0f;
  }
  return data;
}

Dataset load_cifar_file(const std::string& path, CifarVariant variant) {
  const auto bytes = detail::read_file(path);
  return parse_cifar(bytes, variant, path);
}

std::vector<std::uint8_t> serialize_cifar(const Dataset& data, CifarVariant variant) {
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(data.size()) * static_cast<std::size_t>(record_size(variant)));
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (variant == CifarVariant::kCifar100) {
      out.push_back(data.coarse_labels.empty() ? 0 : data.coarse_labels[static_cast<std::size_t>(i)]);
    }
    out.push_back(static_cast<std::uint8_t>(data.labels[static_cast<std::size_t>(i)]));
    const float* src = data.pixels.data() + i * kImageSize;
    for (int k = 0; k < kImageSize; ++k) {
      out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(src[k] * 255.0f), 0L, 255L)));
    }
  }
  return out;
}

DataSplits load_cifar(const std::string& dir, CifarVariant variant) {
  const bool ten = variant == CifarVariant::kCifar10;
  fs::path root(dir);
  const fs::path nested = root / (ten ? "cifar-10-batches-bin" : "cifar-100-binary");
  if (fs::is_directory(nested)) root = nested;
  std::vector<std::string> train_files;
  if (ten) {
    for (int i = 1; i <= 5; ++i) train_files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    train_files.push_back("train.bin");
  }
  const std::string test_file = ten ? "test_batch.bin" : "test.bin";

  DataSplits splits;
  splits.train.name = (ten ? "cifar10-train" : "cifar100-train");
  splits.train.num_classes = class_count(variant);
  for (const auto& f : train_files) {
    const fs::path p = root / f;
    if (!fs::exists(p)) throw std::runtime_error("missing CIFAR file " + p.string());
    Dataset part = load_cifar_file(p.string(), variant);
    splits.train.pixels.insert(splits.train.pixels.end(), part.pixels.begin(), part.pixels.end());
    splits.train.labels.insert(splits.train.labels.end(), part.labels.begin(), part.labels.end());
    splits.train.coarse_labels.insert(splits.train.coarse_labels.end(), part.coarse_labels.begin(), part.coarse_labels.end());
  }
  const fs::path tp = root / test_file;
  if (!fs::exists(tp)) throw std::runtime_error("missing CIFAR file " + tp.string());
  splits.test = load_cifar_file(tp.string(), variant);
  splits.test.name = (ten ? "cifar10-test" : "cifar100-test");
  splits.train.compute_normalization();
  splits.test.copy_normalization(splits.train);
  return splits;
}

// ---- augmentation -------------------------------------------------------------

void AugmentConfig::validate() const {
  if (pad < 0) throw std::invalid_argument("augment: pad must be >= 0");
  if (crop < 1 || crop > kImageSide + 2 * pad) throw std::invalid_argument("augment: crop must not exceed the padded size");
}

CropOffset draw_crop_offset(const AugmentConfig& cfg, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, kImageSide + 2 * cfg.pad - cfg.crop);
  CropOffset off;
  off.row = pick(rng);
  off.col = pick(rng);
  return off;
}

void flip_horizontal(std::span<float> pixels) {
  const std::size_t rows = pixels.size() / kImageSide;
  for (std::size_t r = 0; r < rows; ++r) {
    std::reverse(pixels.begin() + static_cast<std::ptrdiff_t>(r * kImageSide),
                 pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * kImageSide));
  }
}

LabeledImage augment(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  LabeledImage out = img;
  if (cfg.flip) {
    std::bernoulli_distribution coin(0.5);
    if (coin(rng)) flip_horizontal(out.pixels);
  }
  if (cfg.pad == 0 && cfg.crop == kImageSide) return out;
  const CropOffset off = draw_crop_offset(cfg, rng);
  const int padded = kImageSide + 2 * cfg.pad;
  std::vector<float> result(static_cast<std::size_t>(kImageChannels * cfg.crop * cfg.crop), 0.0f);
  for (int c = 0; c < kImageChannels; ++c) {
    for (int r = 0; r < cfg.crop; ++r) {
      const int src_r = off.row + r - cfg.pad;
      if (src_r < 0 || src_r >= kImageSide || r + off.row >= padded) continue;
      for (int k = 0; k < cfg.crop; ++k) {
        const int src_c = off.col + k - cfg.pad;
        if (src_c < 0 || src_c >= kImageSide) continue;
        result[static_cast<std::size_t>((c * cfg.crop + r) * cfg.crop + k)] =
            out.pixels[static_cast<std::size_t>((c * kImageSide + src_r) * kImageSide + src_c)];
      }
    }
  }
  out.pixels = std::move(result);
  return out;
}

// ---- synthetic data -----------------------------------------------------------

namespace {

constexpr int kBlobsPerClass = 3;

struct Blob {
  double cx, cy, sigma;
  double rgb[3];
};

// Classes come in pairs (0,1), (2,3), ...: the second class of a pair reuses
// two of the first class's blobs with perturbed colours, so paired classes
// differ in a single blob.
std::vector<std::vector<Blob>> synthetic_blobs(int num_classes) {
  Rng rng(0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(num_classes));
  std::uniform_real_distribution<double> col(1.5, 15.5);
  std::uniform_real_distribution<double> row(1.5, 29.5);
  std::uniform_real_distribution<double> width(2.5, 5.0);
  std::normal_distribution<double> colour(0.0, 1.0);
  std::vector<std::vector<Blob>> out(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    auto& blobs = out[static_cast<std::size_t>(k)];
    for (int b = 0; b < kBlobsPerClass; ++b) {
      Blob blob{col(rng), row(rng), width(rng), {colour(rng), colour(rng), colour(rng)}};
      if (k % 2 == 1 && b < 2) {
        blob = out[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(b)];
        for (double& c : blob.rgb) c += 0.3 * colour(rng);
      }
      blobs.push_back(blob);
    }
  }
  return out;
}

// Adds a blob and its horizontal mirror image, scaled by `amplitude`.
void render_blob(const Blob& blob, double dx, double dy, double amplitude, float* dst) {
  constexpr int plane = kImageSide * kImageSide;
  const double cx = blob.cx + dx, cy = blob.cy + dy, s2 = 2 * blob.sigma * blob.sigma;
  const double mx = kImageSide - 1 - blob.cx + dx;
  for (int y = 0; y < kImageSide; ++y) {
    for (int x = 0; x < kImageSide; ++x) {
      const double g = amplitude * (std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / s2) +
                                    std::exp(-((x - mx) * (x - mx) + (y - cy) * (y - cy)) / s2));
      for (int c = 0; c < kImageChannels; ++c) dst[c * plane + y * kImageSide + x] += static_cast<float>(blob.rgb[c] * g);
    }
  }
}

}  // namespace

Dataset make_synthetic(std::int64_t n, int num_classes, double difficulty, std::uint64_t seed) {
  if (n < 1 || num_classes < 1) throw std::invalid_argument("make_synthetic: n and num_classes must be >= 1");
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw std::invalid_argument("make_synthetic: difficulty must lie in [0,1]");
  const auto blobs = synthetic_blobs(num_classes);
  // Difficulty scales every nuisance together: translation, contrast loss,
  // distractor blobs borrowed from other classes, and pixel noise.
  const double max_shift = 6.0 * difficulty;
  const double contrast_loss = 0.5 * difficulty;
  const int max_distractors = static_cast<int>(std::lround(4.0 * difficulty));
  const double noise = 0.05 + 0.6 * difficulty;

  Dataset data;
  data.name = "synthetic";
  data.num_classes = num_classes;
  data.pixels.assign(static_cast<std::size_t>(n) * kImageSize, 0.0f);
  data.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  std::uniform_int_distribution<int> pick_class(0, num_classes - 1);
  std::uniform_int_distribution<int> pick_blob(0, kBlobsPerClass - 1);
  std::uniform_int_distribution<int> pick_count(0, max_distractors);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = pick_class(rng);
    float* dst = data.pixels.data() + i * kImageSize;
    const double dx = max_shift * (2 * unit(rng) - 1), dy = max_shift * (2 * unit(rng) - 1);
    const double amplitude = 1.0 - contrast_loss * unit(rng);
    for (const Blob& blob : blobs[static_cast<std::size_t>(label)]) render_blob(blob, dx, dy, amplitude, dst);
    const int distractors = num_classes > 1 ? pick_count(rng) : 0;
    for (int k = 0; k < distractors; ++k) {
      int other = pick_class(rng);
      if (other == label) other = (other + 1) % num_classes;
      Blob blob = blobs[static_cast<std::size_t>(other)][static_cast<std::size_t>(pick_blob(rng))];
      blob.cx = 1.5 + 14.0 * unit(rng);
      blob.cy = 1.5 + 28.0 * unit(rng);
      render_blob(blob, 0.0, 0.0, 0.5 + 0.5 * unit(rng), dst);
    }
    for (int k = 0; k < kImageSize; ++k) dst[k] += static_cast<float>(noise) * gauss(rng);
    data.labels[static_cast<std::size_t>(i)] = label;
  }
  data.compute_normalization();
  return data;
}

// ---- batching -----------------------------------------------------------------

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices, const AugmentConfig* cfg, Rng* rng) {
  if (cfg && !rng) throw std::invalid_argument("make_batch: augmentation needs a generator");
  if (cfg && cfg->crop != kImageSide) throw std::invalid_argument("make_batch: training crops must be 32x32");
  Batch batch;
  const auto b = static_cast<std::int64_t>(indices.size());
  std::vector<float> pixels(static_cast<std::size_t>(b) * kImageSize);
  for (std::int64_t i = 0; i < b; ++i) {
    LabeledImage img = data.image(indices[static_cast<std::size_t>(i)]);
    if (cfg) img = augment(img, *cfg, *rng);
    std::copy(img.pixels.begin(), img.pixels.end(), pixels.begin() + i * kImageSize);
    batch.labels.push_back(img.label);
    batch.indices.push_back(img.index);
  }
  batch.images = TensorF::from(Shape{b, kImageChannels, kImageSide, kImageSide}, std::move(pixels));
  return batch;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, int epoch) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<std::vector<std::int64_t>> minibatches(const std::vector<std::int64_t>& order, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    if (end - start == 1 && !out.empty()) {
      out.back().push_back(order[start]);
    } else {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return out;
}

// ---- teacher logits -----------------------------------------------------------

std::span<const float> TeacherLogitsStore::row(std::int64_t index) const {
  if (index < 0 || index >= size) throw std::out_of_range("logits store: index " + std::to_string(index) + " out of range");
  return std::span<const float>(rows).subspan(static_cast<std::size_t>(index * num_classes),
                                              static_cast<std::size_t>(num_classes));
}

TensorF TeacherLogitsStore::gather(std::span<const std::int64_t> indices) const {
  std::vector<float> values;
  values.reserve(indices.size() * static_cast<std::size_t>(num_classes));
  for (auto i : indices) {
    auto r = row(i);
    values.insert(values.end(), r.begin(), r.end());
  }
  return TensorF::from(Shape{static_cast<std::int64_t>(indices.size()), num_classes}, std::move(values));
}

void TeacherLogitsStore::check_aligned(const Dataset& data) const {
  if (size != data.size()) {
    throw std::invalid_argument("logits store has " + std::to_string(size) + " rows but the dataset has " +
                                std::to_string(data.size()) + " images");
  }
  if (num_classes != data.num_classes) {
    throw std::invalid_argument("logits store has " + std::to_string(num_classes) + " classes but the dataset has " +
                                std::to_string(data.num_classes));
  }
  if (static_cast<std::int64_t>(rows.size()) != size * num_classes) {
    throw std::invalid_argument("logits store payload does not match its header");
  }
}

namespace {
constexpr char kLogitsMagic[8] = {'K', 'D', 'L', 'O', 'G', 'I', 'T', 'S'};
constexpr std::uint32_t kLogitsVersion = 1;

std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}
}  // namespace

std::vector<std::uint8_t> encode_logits_store(const TeacherLogitsStore& store) {
  if (static_cast<std::int64_t>(store.rows.size()) != store.size * store.num_classes) {
    throw std::invalid_argument("logits store payload does not match N*C");
  }
  detail::Bytes out;
  out.insert(out.end(), kLogitsMagic, kLogitsMagic + 8);
  detail::put_u32(out, kLogitsVersion);
  detail::put_u64(out, static_cast<std::uint64_t>(store.size));
  detail::put_u32(out, static_cast<std::uint32_t>(store.num_classes));
  const std::size_t payload_start = out.size();
  for (float v : store.rows) detail::put_f32(out, v);
  detail::put_u32(out, crc32(out.data() + payload_start, out.size() - payload_start));
  return out;
}

TeacherLogitsStore decode_logits_store(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  detail::Reader in(bytes, what);
  if (in.str(8) != std::string(kLogitsMagic, 8)) throw std::runtime_error(what + ": not a logits store");
  const std::uint32_t version = in.u32();
  if (version != kLogitsVersion) throw std::runtime_error(what + ": unsupported version " + std::to_string(version));
  TeacherLogitsStore store;
  store.size = static_cast<std::int64_t>(in.u64());
  store.num_classes = static_cast<int>(in.u32());
  const std::size_t payload_start = in.offset();
  const std::size_t payload = static_cast<std::size_t>(store.size) * static_cast<std::size_t>(store.num_classes);
  store.rows.resize(payload);
  for (auto& v : store.rows) v = in.f32();
  const std::uint32_t expected = crc32(bytes.data() + payload_start, payload * 4);
  const std::uint32_t stored = in.u32();
  if (stored != expected) throw std::runtime_error(what + ": checksum mismatch (payload corrupted)");
  if (in.remaining() != 0) throw std::runtime_error(what + ": trailing bytes after checksum");
  return store;
}

void save_logits_store(const std::string& path, const TeacherLogitsStore& store) {
  detail::write_file(path, encode_logits_store(store));
  std::ofstream(path + ".provenance") << store.provenance << '\n';
}

TeacherLogitsStore load_logits_store(const std::string& path) {
  TeacherLogitsStore store = decode_logits_store(detail::read_file(path), path);
  std::ifstream prov(path + ".provenance");
  if (prov) std::getline(prov, store.provenance);
  return store;
}

TeacherLogitsStore export_teacher_logits(Classifier& teacher, const Dataset& data, int batch_size,
                                         const std::string& provenance) {
  if (teacher.num_classes() != data.num_classes) {
    throw std::invalid_argument("teacher predicts " + std::to_string(teacher.num_classes()) +
                                " classes but the dataset has " + std::to_string(data.num_classes));
  }
  TeacherLogitsStore store;
  store.num_classes = data.num_classes;
  store.size = data.size();
  store.provenance = provenance;
  store.rows.reserve(static_cast<std::size_t>(store.size * store.num_classes));
  NoGradGuard no_grad;
  Rng unused(0);
  std::vector<std::int64_t> indices;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    indices.clear();
    for (std::int64_t i = start; i < std::min(data.size(), start + batch_size); ++i) indices.push_back(i);
    const Batch batch = make_batch(data, indices, nullptr, nullptr);
    const TensorF logits = teacher.logits(batch, Mode::kEval, unused);
    store.rows.insert(store.rows.end(), logits.values().begin(), logits.values().end());
  }
  return store;
}

}  // namespace kdgan
