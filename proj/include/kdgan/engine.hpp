#pragma once

// Training loops (supervised, distillation, adversarial distillation),
// evaluation and the per-run output directory.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdgan/architectures.hpp"
#include "kdgan/data.hpp"
#include "kdgan/losses.hpp"
#include "kdgan/optim.hpp"

namespace kdgan {

enum class RunMode { kBaseline, kKd, kGan };
std::string to_string(RunMode mode);
RunMode parse_run_mode(const std::string& text);

enum class AdversarialForm { kMinimax, kNonSaturating };

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10 | cifar100
  std::string path;                  // CIFAR directory
  int num_classes = 10;              // synthetic only
  std::int64_t train_size = 5000;    // 0 keeps the whole split
  std::int64_t test_size = 2000;
  double difficulty = 0.5;
  std::uint64_t data_seed = 7;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const;
};

DataSplits load_data(const DataConfig& cfg);

struct ExperimentConfig {
  RunMode mode = RunMode::kBaseline;
  NetworkSpec network;  // the network being trained
  DataConfig data;
  int epochs = 20;
  int batch_size = 128;
  std::uint64_t seed = 1;
  int eval_every = 1;
  std::string init_checkpoint;  // optional warm start for `network`

  // kd / gan
  std::string logits_path;
  std::string teacher_checkpoint;  // only for on-the-fly teacher logits
  bool teacher_on_the_fly = false;
  double temperature = 5.0;

  // gan
  bool use_supervised = true;
  bool use_l1 = true;
  bool use_adversarial = true;
  DiscriminatorSpec discriminator;
  int discriminator_steps = 1;
  AdversarialForm adversarial_form = AdversarialForm::kMinimax;

  SgdConfig optim;
  SgdConfig discriminator_optim;

  ExperimentConfig();
  // Throws ConfigError naming the offending field.
  void validate() const;
  bool trains_discriminator() const { return mode == RunMode::kGan && use_adversarial; }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a run needs an artifact another subcommand produces.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_error = 0.0;
  std::optional<double> test_error;
  double train_objective = 0.0;
  LossReport losses;  // epoch means
  double seconds = 0.0;
  std::vector<std::string> warnings;
};

struct TrainingRun {
  std::vector<EpochRecord> epochs;
  double final_test_error = 0.0;
  double best_test_error = 100.0;
  int best_epoch = -1;
  std::vector<std::string> artifacts;
};

enum class StepPhase { kBegin, kAfterDiscriminator, kAfterStudent };

// Observation points inside one minibatch step, for tests.
struct TrainingHooks {
  std::function<void(StepPhase, const WideResNet<float>& student, const Discriminator<float>* disc)> on_step;
};

// Everything a run needs that does not live in the config file.
struct RunContext {
  std::string output_dir;  // empty: nothing is written
  const DataSplits* data = nullptr;  // optional preloaded data
  const TeacherLogitsStore* logits = nullptr;  // optional preloaded store
  TrainingHooks hooks;
  bool quiet = true;
};

TrainingRun train_supervised(const ExperimentConfig& cfg, const RunContext& ctx);
TrainingRun train_kd(const ExperimentConfig& cfg, const RunContext& ctx);
TrainingRun train_gan(const ExperimentConfig& cfg, const RunContext& ctx);
// Dispatches on cfg.mode.
TrainingRun train(const ExperimentConfig& cfg, const RunContext& ctx);

// Non-owning Classifier view of a network.
class NetworkView : public Classifier {
 public:
  explicit NetworkView(WideResNet<float>& net) : net_(net) {}
  TensorF logits(const Batch& batch, Mode mode, Rng& rng) override { return net_.forward(batch.images, mode, rng); }
  int num_classes() const override { return net_.spec().num_classes; }
  std::string describe() const override { return net_.spec().name(); }

 private:
  WideResNet<float>& net_;
};

// Top-1 error in percent, eval mode, no augmentation.
double evaluate(Classifier& model, const Dataset& data, int batch_size = 250);

struct PredictionHistogram {
  int class_id = 0;
  std::vector<double> edges;  // bins + 1 edges over [0,1]
  std::vector<double> positive;
  std::vector<double> negative;
  double positive_mean = 0.0;
  double negative_mean = 0.0;
};

PredictionHistogram prediction_histogram(Classifier& model, const Dataset& data, int class_id, int bins);
void write_histogram_csv(const std::string& path, const PredictionHistogram& hist);

// Median seconds per forward of a random (batch_size,3,32,32) batch.
double measure_inference_time(WideResNet<float>& net, int batch_size, int repeats);

}  // namespace kdgan
