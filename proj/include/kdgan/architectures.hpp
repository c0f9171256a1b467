#pragma once

// Wide residual networks (student and teacher) and the residual-MLP
// discriminator, plus the checkpoint container both are saved in.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kdgan/classifier.hpp"
#include "kdgan/layers.hpp"

namespace kdgan {

// WRN-d-m: depth d = 6n + 4 with n residual blocks per group, widen factor m.
struct NetworkSpec {
  int depth = 10;
  int widen = 1;
  int num_classes = 10;
  double dropout = 0.3;
  BatchNormConfig bn;

  int blocks_per_group() const { return (depth - 4) / 6; }
  void validate() const;
  std::string name() const;  // "WRN-d-m"

  // "16-4" or "WRN-16-4" -> depth/widen.
  static NetworkSpec parse(const std::string& text, int num_classes);
};

struct DiscriminatorSpec {
  int depth = 3;  // residual MLP blocks
  int num_classes = 10;
  double dropout = 0.3;
  BatchNormConfig bn;

  int width() const { return num_classes; }
  int output_dim() const { return num_classes + 2; }
  void validate() const;
};

template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) = 0;
  virtual ParameterSet<T> parameters() const = 0;
  virtual std::map<std::string, std::string> provenance() const = 0;
};

// conv3x3(3->16) -> 3 groups of n blocks (16m, 32m, 64m channels; groups 2
// and 3 open with stride 2) -> BN -> ReLU -> global average pool -> FC(64m->C).
template <typename T>
class WideResNet : public Network<T> {
 public:
  WideResNet(NetworkSpec spec, Rng& init_rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) override;
  ParameterSet<T> parameters() const override;
  std::map<std::string, std::string> provenance() const override;
  const NetworkSpec& spec() const { return spec_; }

  const std::vector<ResidualBlock<T>>& blocks() const { return blocks_; }

 private:
  NetworkSpec spec_;
  Conv2d<T> stem_;
  std::vector<ResidualBlock<T>> blocks_;
  BatchNorm<T> final_bn_;
  Linear<T> classifier_;
};

// BN(logits) -> depth x residual MLP block of width C -> Linear(C -> C+2).
// Columns [0,C) are label scores, column C is Real and C+1 is Fake.
template <typename T>
class Discriminator : public Network<T> {
 public:
  Discriminator(DiscriminatorSpec spec, Rng& init_rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) override;
  ParameterSet<T> parameters() const override;
  std::map<std::string, std::string> provenance() const override;
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  BatchNorm<T> input_bn_;
  std::vector<ResidualBlock<T>> blocks_;
  Linear<T> head_;
};

template <typename T>
std::unique_ptr<WideResNet<T>> build_wrn(const NetworkSpec& spec, std::uint64_t seed);
template <typename T>
std::unique_ptr<Discriminator<T>> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed);

// Slices of a discriminator output.
template <typename T>
Tensor<T> label_scores(const Tensor<T>& d_out, int num_classes);
template <typename T>
Tensor<T> real_fake_scores(const Tensor<T>& d_out, int num_classes);

// Trainable scalars only; running statistics are excluded.
template <typename T>
std::int64_t count_parameters(const ParameterSet<T>& params);
template <typename T>
std::int64_t count_parameters(const Network<T>& net) {
  return count_parameters(net.parameters());
}

// Copies values (trainable and buffers) by name; shapes must agree.
template <typename T>
void copy_parameters(const ParameterSet<T>& from, const ParameterSet<T>& to);

// ---- checkpoints -------------------------------------------------------------

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<CheckpointTensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const Network<float>& net);
// Loads every trainable tensor and buffer of `net` from the checkpoint.
void restore_parameters(const Checkpoint& ckpt, const Network<float>& net);

// Adapts a float WRN to the Classifier interface.
class NetworkClassifier : public Classifier {
 public:
  explicit NetworkClassifier(std::unique_ptr<WideResNet<float>> net) : net_(std::move(net)) {}
  TensorF logits(const Batch& batch, Mode mode, Rng& rng) override { return net_->forward(batch.images, mode, rng); }
  int num_classes() const override { return net_->spec().num_classes; }
  std::string describe() const override { return net_->spec().name(); }
  WideResNet<float>& network() { return *net_; }

 private:
  std::unique_ptr<WideResNet<float>> net_;
};

// Builds the model a checkpoint describes: header key "arch" selects
// wrn | oracle-stub | constant-stub.
std::unique_ptr<Classifier> load_classifier(const std::string& path);

std::map<std::string, std::string> spec_header(const NetworkSpec& spec);
NetworkSpec spec_from_header(const std::map<std::string, std::string>& header);

}  // namespace kdgan
