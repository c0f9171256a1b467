#include "kdgan/architectures.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "kdgan/ops.hpp"

namespace kdgan {

void NetworkSpec::validate() const {
  if (depth < 10 || (depth - 4) % 6 != 0) {
    throw std::invalid_argument("WRN depth must satisfy depth = 6n + 4 with n >= 1 (depth - 4 divisible by 6), got " +
                                std::to_string(depth));
  }
  if (widen < 1) throw std::invalid_argument("WRN widen factor must be >= 1, got " + std::to_string(widen));
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0,1)");
}

std::string NetworkSpec::name() const { return "WRN-" + std::to_string(depth) + "-" + std::to_string(widen); }

NetworkSpec NetworkSpec::parse(const std::string& text, int num_classes) {
  std::string s = text;
  if (s.rfind("WRN-", 0) == 0 || s.rfind("wrn-", 0) == 0) s = s.substr(4);
  const auto dash = s.find('-');
  NetworkSpec spec;
  spec.num_classes = num_classes;
  auto parse_int = [&](std::string_view part, int& out) {
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    if (ec != std::errc() || ptr != part.data() + part.size()) {
      throw std::invalid_argument("cannot parse network spec '" + text + "' (expected depth-widen, e.g. 10-4)");
    }
  };
  if (dash == std::string::npos) throw std::invalid_argument("cannot parse network spec '" + text + "'");
  parse_int(std::string_view(s).substr(0, dash), spec.depth);
  parse_int(std::string_view(s).substr(dash + 1), spec.widen);
  spec.validate();
  return spec;
}

void DiscriminatorSpec::validate() const {
  if (depth < 1) throw std::invalid_argument("discriminator depth must be >= 1, got " + std::to_string(depth));
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0,1)");
}

namespace {

template <typename T>
std::vector<ResidualBlock<T>> make_wrn_blocks(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<ResidualBlock<T>> blocks;
  const int n = spec.blocks_per_group();
  int in = 16;
  for (int group = 0; group < 3; ++group) {
    const int width = (16 << group) * spec.widen;
    for (int i = 0; i < n; ++i) {
      ResidualBlockSpec b;
      b.kind = ResidualBlockSpec::Kind::kConv;
      b.in_channels = in;
      b.out_channels = width;
      b.stride = (i == 0 && group > 0) ? 2 : 1;
      b.dropout_rate = spec.dropout;
      blocks.emplace_back(b, rng, spec.bn);
      in = width;
    }
  }
  return blocks;
}

template <typename T>
std::vector<ResidualBlock<T>> make_mlp_blocks(const DiscriminatorSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<ResidualBlock<T>> blocks;
  for (int i = 0; i < spec.depth; ++i) {
    ResidualBlockSpec b;
    b.kind = ResidualBlockSpec::Kind::kMlp;
    b.in_channels = b.out_channels = spec.width();
    b.dropout_rate = spec.dropout;
    blocks.emplace_back(b, rng, spec.bn);
  }
  return blocks;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::string& header_value(const std::map<std::string, std::string>& header, const std::string& key) {
  auto it = header.find(key);
  if (it == header.end()) throw std::runtime_error("checkpoint header lacks '" + key + "'");
  return it->second;
}

}  // namespace

template <typename T>
WideResNet<T>::WideResNet(NetworkSpec spec, Rng& init_rng)
    : spec_(spec),
      stem_(3, 16, 3, 1, 1, init_rng),
      blocks_(make_wrn_blocks<T>(spec, init_rng)),
      final_bn_(64 * spec.widen, spec.bn),
      classifier_(64 * spec.widen, spec.num_classes, init_rng) {}

template <typename T>
Tensor<T> WideResNet<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("WRN expects (B,3,H,W) input, got " + to_string(x.shape()));
  Tensor<T> h = stem_.forward(x);
  for (auto& block : blocks_) h = block.forward(h, mode, rng);
  h = ops::relu(final_bn_.forward(h, mode));
  if (h.dim(2) != h.dim(3)) throw ShapeError("WRN expects square inputs, got " + to_string(x.shape()));
  h = ops::avg_pool2d(h, static_cast<int>(h.dim(2)), 1);
  h = ops::reshape(h, Shape{h.dim(0), h.dim(1)});
  return classifier_.forward(h);
}

template <typename T>
ParameterSet<T> WideResNet<T>::parameters() const {
  ParameterSet<T> out;
  stem_.collect("stem", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("block" + std::to_string(i), out);
  final_bn_.collect("final_bn", out);
  classifier_.collect("fc", out);
  return out;
}

template <typename T>
std::map<std::string, std::string> WideResNet<T>::provenance() const {
  return spec_header(spec_);
}

template <typename T>
Discriminator<T>::Discriminator(DiscriminatorSpec spec, Rng& init_rng)
    : spec_(spec),
      input_bn_(spec.width(), spec.bn),
      blocks_(make_mlp_blocks<T>(spec, init_rng)),
      head_(spec.width(), spec.output_dim(), init_rng) {}

template <typename T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() != 2 || x.dim(1) != spec_.width()) {
    throw ShapeError("discriminator expects (B," + std::to_string(spec_.width()) + ") logits, got " +
                     to_string(x.shape()));
  }
  Tensor<T> h = input_bn_.forward(x, mode);
  for (auto& block : blocks_) h = block.forward(h, mode, rng);
  return head_.forward(h);
}

template <typename T>
ParameterSet<T> Discriminator<T>::parameters() const {
  ParameterSet<T> out;
  input_bn_.collect("input_bn", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("block" + std::to_string(i), out);
  head_.collect("head", out);
  return out;
}

template <typename T>
std::map<std::string, std::string> Discriminator<T>::provenance() const {
  return {{"arch", "discriminator"},
          {"depth", std::to_string(spec_.depth)},
          {"num_classes", std::to_string(spec_.num_classes)},
          {"dropout", format_double(spec_.dropout)},
          {"bn_eps", format_double(spec_.bn.eps)},
          {"bn_momentum", format_double(spec_.bn.momentum)}};
}

template <typename T>
std::unique_ptr<WideResNet<T>> build_wrn(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  return std::make_unique<WideResNet<T>>(spec, rng);
}

template <typename T>
std::unique_ptr<Discriminator<T>> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  return std::make_unique<Discriminator<T>>(spec, rng);
}

template <typename T>
Tensor<T> label_scores(const Tensor<T>& d_out, int num_classes) {
  return ops::slice(d_out, 1, 0, num_classes);
}

template <typename T>
Tensor<T> real_fake_scores(const Tensor<T>& d_out, int num_classes) {
  return ops::slice(d_out, 1, num_classes, 2);
}

template <typename T>
std::int64_t count_parameters(const ParameterSet<T>& params) {
  std::int64_t total = 0;
  for (const auto& p : params.trainable) total += p.tensor.numel();
  return total;
}

template <typename T>
void copy_parameters(const ParameterSet<T>& from, const ParameterSet<T>& to) {
  auto copy_list = [](const std::vector<NamedTensor<T>>& src, const std::vector<NamedTensor<T>>& dst) {
    if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters: parameter lists differ in length");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
        throw std::invalid_argument("copy_parameters: mismatch at " + src[i].name);
      }
      Tensor<T> target = dst[i].tensor;
      auto out = target.mutable_values();
      std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), out.begin());
    }
  };
  copy_list(from.trainable, to.trainable);
  copy_list(from.buffers, to.buffers);
}

// ---- checkpoint container ---------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'K', 'D', 'G', 'A', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  detail::Bytes out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.header.size()));
  for (const auto& [key, value] : ckpt.header) {
    detail::put_u32(out, static_cast<std::uint32_t>(key.size()));
    detail::put_bytes(out, key);
    detail::put_u32(out, static_cast<std::uint32_t>(value.size()));
    detail::put_bytes(out, value);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    detail::put_bytes(out, t.name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto extent : t.shape) detail::put_u64(out, static_cast<std::uint64_t>(extent));
    for (float v : t.values) detail::put_f32(out, v);
  }
  detail::write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const detail::Bytes bytes = detail::read_file(path);
  detail::Reader in(bytes, "checkpoint " + path);
  if (in.str(8) != std::string(kCheckpointMagic, 8)) throw std::runtime_error(path + " is not a checkpoint file");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t entries = in.u32();
  for (std::uint32_t i = 0; i < entries; ++i) {
    std::string key = in.str(in.u32());
    ckpt.header[key] = in.str(in.u32());
  }
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = in.str(in.u32());
    const std::uint32_t rank = in.u32();
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(static_cast<std::int64_t>(in.u64()));
    const auto n = static_cast<std::size_t>(numel(t.shape));
    t.values.resize(n);
    for (auto& v : t.values) v = in.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw std::runtime_error(path + ": trailing bytes after checkpoint payload");
  return ckpt;
}

Checkpoint make_checkpoint(const Network<float>& net) {
  Checkpoint ckpt;
  ckpt.header = net.provenance();
  const auto params = net.parameters();
  for (const auto* list : {&params.trainable, &params.buffers}) {
    for (const auto& p : *list) {
      ckpt.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.values().begin(), p.tensor.values().end())});
    }
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, const Network<float>& net) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  const auto params = net.parameters();
  for (const auto* list : {&params.trainable, &params.buffers}) {
    for (const auto& p : *list) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + p.name);
      if (it->second->shape != p.tensor.shape()) {
        throw ShapeError("checkpoint tensor " + p.name + " has shape " + to_string(it->second->shape) +
                         ", network expects " + to_string(p.tensor.shape()));
      }
      TensorF target = p.tensor;
      std::copy(it->second->values.begin(), it->second->values.end(), target.mutable_values().begin());
    }
  }
}

std::map<std::string, std::string> spec_header(const NetworkSpec& spec) {
  return {{"arch", "wrn"},
          {"depth", std::to_string(spec.depth)},
          {"widen", std::to_string(spec.widen)},
          {"num_classes", std::to_string(spec.num_classes)},
          {"dropout", format_double(spec.dropout)},
          {"bn_eps", format_double(spec.bn.eps)},
          {"bn_momentum", format_double(spec.bn.momentum)}};
}

NetworkSpec spec_from_header(const std::map<std::string, std::string>& header) {
  if (header_value(header, "arch") != "wrn") throw std::runtime_error("checkpoint is not a WRN");
  NetworkSpec spec;
  spec.depth = std::stoi(header_value(header, "depth"));
  spec.widen = std::stoi(header_value(header, "widen"));
  spec.num_classes = std::stoi(header_value(header, "num_classes"));
  spec.dropout = std::stod(header_value(header, "dropout"));
  spec.bn.eps = std::stod(header_value(header, "bn_eps"));
  spec.bn.momentum = std::stod(header_value(header, "bn_momentum"));
  spec.validate();
  return spec;
}

std::unique_ptr<Classifier> load_classifier(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  const std::string& arch = header_value(ckpt.header, "arch");
  if (arch == "wrn") {
    auto net = build_wrn<float>(spec_from_header(ckpt.header), 0);
    restore_parameters(ckpt, *net);
    return std::make_unique<NetworkClassifier>(std::move(net));
  }
  const int classes = std::stoi(header_value(ckpt.header, "num_classes"));
  if (arch == "oracle-stub") return std::make_unique<OracleStub>(classes);
  if (arch == "constant-stub") {
    std::vector<float> row(static_cast<std::size_t>(classes), 0.0f);
    if (!ckpt.tensors.empty() && ckpt.tensors[0].values.size() == row.size()) row = ckpt.tensors[0].values;
    return std::make_unique<ConstantStub>(std::move(row));
  }
  throw std::runtime_error(path + ": unknown arch '" + arch + "'");
}

template class WideResNet<float>;
template class WideResNet<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template std::unique_ptr<WideResNet<float>> build_wrn<float>(const NetworkSpec&, std::uint64_t);
template std::unique_ptr<WideResNet<double>> build_wrn<double>(const NetworkSpec&, std::uint64_t);
template std::unique_ptr<Discriminator<float>> build_discriminator<float>(const DiscriminatorSpec&, std::uint64_t);
template std::unique_ptr<Discriminator<double>> build_discriminator<double>(const DiscriminatorSpec&, std::uint64_t);
template Tensor<float> label_scores<float>(const Tensor<float>&, int);
template Tensor<double> label_scores<double>(const Tensor<double>&, int);
template Tensor<float> real_fake_scores<float>(const Tensor<float>&, int);
template Tensor<double> real_fake_scores<double>(const Tensor<double>&, int);
template std::int64_t count_parameters<float>(const ParameterSet<float>&);
template std::int64_t count_parameters<double>(const ParameterSet<double>&);
template void copy_parameters<float>(const ParameterSet<float>&, const ParameterSet<float>&);
template void copy_parameters<double>(const ParameterSet<double>&, const ParameterSet<double>&);

}  // namespace kdgan
