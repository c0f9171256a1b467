#include "kdgan/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kdgan/config.hpp"
#include "kdgan/ops.hpp"

namespace kdgan {

namespace fs = std::filesystem;

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::kBaseline: return "baseline";
    case RunMode::kKd: return "kd";
    case RunMode::kGan: return "gan";
  }
  return "baseline";
}

RunMode parse_run_mode(const std::string& text) {
  if (text == "baseline") return RunMode::kBaseline;
  if (text == "kd") return RunMode::kKd;
  if (text == "gan") return RunMode::kGan;
  throw ConfigError("experiment.mode: expected baseline, kd or gan, got '" + text + "'");
}

void DataConfig::validate() const {
  if (source != "synthetic" && source != "cifar10" && source != "cifar100") {
    throw ConfigError("data.source: expected synthetic, cifar10 or cifar100, got '" + source + "'");
  }
  if (source != "synthetic" && path.empty()) throw ConfigError("data.path: required when data.source = " + source);
  if (num_classes < 2) throw ConfigError("data.num_classes: must be >= 2");
  if (train_size < 0 || test_size < 0) throw ConfigError("data.train_size/test_size: must be >= 0");
  if (source == "synthetic" && (train_size < 2 || test_size < 1)) {
    throw ConfigError("data.train_size/test_size: synthetic data needs explicit sizes");
  }
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw ConfigError("data.difficulty: must lie in [0,1]");
  try {
    augmentation.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.") + e.what());
  }
  if (augmentation.crop != kImageSide) throw ConfigError("data.crop: training crops must be 32");
}

DataSplits load_data(const DataConfig& cfg) {
  cfg.validate();
  DataSplits splits;
  if (cfg.source == "synthetic") {
    splits.train = make_synthetic(cfg.train_size, cfg.num_classes, cfg.difficulty, cfg.data_seed);
    splits.test = make_synthetic(cfg.test_size, cfg.num_classes, cfg.difficulty, cfg.data_seed + 0x7e57);
    splits.train.name = "synthetic-train";
    splits.test.name = "synthetic-test";
  } else {
    splits = load_cifar(cfg.path, cfg.source == "cifar10" ? CifarVariant::kCifar10 : CifarVariant::kCifar100);
    if (cfg.train_size > 0 && cfg.train_size < splits.train.size()) {
      splits.train = splits.train.head(cfg.train_size);
      splits.train.compute_normalization();
    }
    if (cfg.test_size > 0 && cfg.test_size < splits.test.size()) splits.test = splits.test.head(cfg.test_size);
  }
  splits.test.copy_normalization(splits.train);
  return splits;
}

ExperimentConfig::ExperimentConfig() {
  discriminator_optim.lr0 = 1e-3;
  optim = optim.rescaled(200, epochs);
  discriminator_optim = discriminator_optim.rescaled(200, epochs);
}

void ExperimentConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(section) + ": " + e.what());
    }
  };
  wrap("network", [&] { network.validate(); });
  data.validate();
  if (network.num_classes != data.num_classes && data.source == "synthetic") {
    throw ConfigError("network classes disagree with data.num_classes");
  }
  if (epochs < 1) throw ConfigError("experiment.epochs: must be >= 1");
  if (batch_size < 2) throw ConfigError("experiment.batch_size: must be >= 2 (batch norm needs two samples)");
  if (eval_every < 1) throw ConfigError("experiment.eval_every: must be >= 1");
  wrap("optim", [&] { optim.validate(); });
  if (mode == RunMode::kBaseline) return;
  if (logits_path.empty() && !teacher_on_the_fly) {
    throw ConfigError("teacher.logits: required in " + to_string(mode) + " mode (produce it with export-logits)");
  }
  if (teacher_on_the_fly && teacher_checkpoint.empty()) {
    throw ConfigError("teacher.checkpoint: required when teacher.on_the_fly_dropout = true");
  }
  if (mode == RunMode::kKd) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("kd.temperature: must be a positive real");
    return;
  }
  if (!use_supervised && !use_l1 && !use_adversarial) {
    throw ConfigError("gan: at least one of use_supervised, use_l1, use_adversarial must be true");
  }
  if (use_adversarial) {
    wrap("gan.discriminator", [&] { discriminator.validate(); });
    if (discriminator.num_classes != network.num_classes) throw ConfigError("gan.discriminator: class count mismatch");
    if (discriminator_steps < 1) throw ConfigError("gan.discriminator_steps: must be >= 1");
    wrap("discriminator_optim", [&] { discriminator_optim.validate(); });
  }
}

namespace {

constexpr std::uint64_t kStreamMix = 0x9e3779b97f4a7c15ULL;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return seed * kStreamMix + stream; }

// ---- evaluation helpers -------------------------------------------------------

std::vector<std::int64_t> range_indices(std::int64_t start, std::int64_t end) {
  std::vector<std::int64_t> out;
  for (std::int64_t i = start; i < end; ++i) out.push_back(i);
  return out;
}

int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

int count_errors(const TensorF& logits, const std::vector<int>& labels) {
  const auto c = static_cast<std::size_t>(logits.dim(1));
  int wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_row(logits.values().subspan(i * c, c)) != labels[i]) ++wrong;
  }
  return wrong;
}

// ---- run output ---------------------------------------------------------------

class RunWriter {
 public:
  RunWriter(const std::string& dir, bool quiet, const ExperimentConfig& cfg) : dir_(dir), quiet_(quiet) {
    if (dir_.empty()) return;
    fs::create_directories(dir_);
    std::ofstream(path("config.ini")) << render_config(cfg);
    metrics_.open(path("metrics.csv"));
    losses_.open(path("losses.csv"));
    timing_.open(path("timing.csv"));
    log_.open(path("log.txt"));
    metrics_ << "epoch,lr,train_error,test_error,train_objective\n";
    losses_ << "epoch," << LossReport::csv_header() << "\n";
    timing_ << "epoch,seconds\n";
    artifacts_ = {path("config.ini"), path("metrics.csv"), path("losses.csv"), path("timing.csv"), path("log.txt")};
  }

  bool enabled() const { return !dir_.empty(); }
  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void open_discriminator_log() {
    if (!enabled()) return;
    disc_.open(path("discriminator.csv"));
    disc_ << "step,epoch,L_A,L_DS,L_Discriminator,real_fake_accuracy\n";
    artifacts_.push_back(path("discriminator.csv"));
  }

  void discriminator_step(std::int64_t step, int epoch, double la, double lds, double obj, double acc) {
    if (!disc_.is_open()) return;
    disc_ << step << ',' << epoch << ',' << format_scalar(la) << ',' << format_scalar(lds) << ','
          << format_scalar(obj) << ',' << format_scalar(acc) << '\n';
  }

  void epoch(const EpochRecord& r) {
    if (enabled()) {
      metrics_ << r.epoch << ',' << format_scalar(r.lr) << ',' << format_scalar(r.train_error) << ','
               << (r.test_error ? format_scalar(*r.test_error) : "") << ',' << format_scalar(r.train_objective) << '\n';
      losses_ << r.epoch << ',' << r.losses.csv_fields() << '\n';
      timing_ << r.epoch << ',' << format_scalar(r.seconds) << '\n';
      metrics_.flush();
      losses_.flush();
    }
    std::ostringstream line;
    line << "epoch " << r.epoch << " lr " << format_scalar(r.lr) << " train_error " << format_scalar(r.train_error);
    if (r.test_error) line << " test_error " << format_scalar(*r.test_error);
    line << " objective " << format_scalar(r.train_objective) << " seconds " << format_scalar(r.seconds);
    log(line.str());
    for (const auto& w : r.warnings) log("warning: " + w);
  }

  void log(const std::string& line) {
    if (enabled()) {
      log_ << line << '\n';
      log_.flush();
    }
    if (!quiet_) std::fprintf(stderr, "%s\n", line.c_str());
  }

  void add_artifact(const std::string& p) { artifacts_.push_back(p); }
  const std::vector<std::string>& artifacts() const { return artifacts_; }

 private:
  std::string dir_;
  bool quiet_;
  std::ofstream metrics_, losses_, timing_, log_, disc_;
  std::vector<std::string> artifacts_;
};

// ---- loss accumulation ----------------------------------------------------------

class LossMeans {
 public:
  void add(const std::string& name, double value) {
    for (auto& [n, sum, count] : terms_) {
      if (n == name) {
        sum += value;
        ++count;
        return;
      }
    }
    terms_.emplace_back(name, value, 1);
  }
  LossReport report() const {
    LossReport r;
    for (const auto& [n, sum, count] : terms_) r.set(n, sum / count);
    return r;
  }

 private:
  std::vector<std::tuple<std::string, double, int>> terms_;
};

struct BufferSnapshot {
  std::vector<std::vector<float>> values;
};

BufferSnapshot snapshot_buffers(const ParameterSet<float>& params) {
  BufferSnapshot snap;
  for (const auto& b : params.buffers) snap.values.emplace_back(b.tensor.values().begin(), b.tensor.values().end());
  return snap;
}

void restore_buffers(const ParameterSet<float>& params, const BufferSnapshot& snap) {
  for (std::size_t i = 0; i < params.buffers.size(); ++i) {
    TensorF t = params.buffers[i].tensor;
    std::copy(snap.values[i].begin(), snap.values[i].end(), t.mutable_values().begin());
  }
}

double real_fake_accuracy(const TensorF& rf, std::int64_t batch) {
  int correct = 0;
  for (std::int64_t i = 0; i < 2 * batch; ++i) {
    const float real = rf.at(i * 2), fake = rf.at(i * 2 + 1);
    const bool says_real = real > fake;
    if (says_real == (i < batch)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(2 * batch);
}

// ---- the shared loop ------------------------------------------------------------

TrainingRun run_training(const ExperimentConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  RunWriter writer(ctx.output_dir, ctx.quiet, cfg);

  DataSplits owned_data;
  const DataSplits* data = ctx.data;
  if (!data) {
    owned_data = load_data(cfg.data);
    data = &owned_data;
  }
  const Dataset& train = data->train;
  const Dataset& test = data->test;
  if (train.num_classes != cfg.network.num_classes) {
    throw ConfigError("network.num_classes: " + std::to_string(cfg.network.num_classes) + " but the data has " +
                      std::to_string(train.num_classes) + " classes");
  }

  // Teacher signal.
  TeacherLogitsStore owned_store;
  const TeacherLogitsStore* store = nullptr;
  std::unique_ptr<Classifier> live_teacher;
  if (cfg.mode != RunMode::kBaseline) {
    if (cfg.teacher_on_the_fly) {
      if (!fs::exists(cfg.teacher_checkpoint)) {
        throw MissingArtifactError("teacher checkpoint " + cfg.teacher_checkpoint +
                                   " not found; run train-teacher first");
      }
      live_teacher = load_classifier(cfg.teacher_checkpoint);
      if (live_teacher->num_classes() != train.num_classes) throw ConfigError("teacher.checkpoint: class count mismatch");
    } else if (ctx.logits) {
      store = ctx.logits;
    } else {
      if (!fs::exists(cfg.logits_path)) {
        throw MissingArtifactError("teacher logits store " + cfg.logits_path +
                                   " not found; run export-logits on a trained teacher first");
      }
      owned_store = load_logits_store(cfg.logits_path);
      store = &owned_store;
    }
    if (store) store->check_aligned(train);
  }

  // Networks and optimizers. Every random stream is derived from the seed.
  auto student = build_wrn<float>(cfg.network, stream_seed(cfg.seed, 1));
  if (!cfg.init_checkpoint.empty()) restore_parameters(load_checkpoint(cfg.init_checkpoint), *student);
  const SgdConfig& ocfg = cfg.optim;
  Sgd student_opt(student->parameters(), ocfg);
  Rng augment_rng(stream_seed(cfg.seed, 2));
  Rng student_rng(stream_seed(cfg.seed, 3));
  Rng teacher_rng(stream_seed(cfg.seed, 6));

  std::unique_ptr<Discriminator<float>> disc;
  std::optional<Sgd> disc_opt;
  Rng disc_rng(stream_seed(cfg.seed, 5));
  if (cfg.trains_discriminator()) {
    disc = build_discriminator<float>(cfg.discriminator, stream_seed(cfg.seed, 4));
    disc_opt.emplace(disc->parameters(), cfg.discriminator_optim);
    writer.open_discriminator_log();
  }

  std::ostringstream banner;
  banner << "mode " << to_string(cfg.mode) << " network " << cfg.network.name() << " params "
         << count_parameters(*student) << " train " << train.size() << " test " << test.size() << " seed " << cfg.seed;
  if (disc) banner << " discriminator depth " << cfg.discriminator.depth << " params " << count_parameters(*disc);
  writer.log(banner.str());

  const Temperature temperature(cfg.mode == RunMode::kKd ? cfg.temperature : 1.0);
  const AugmentConfig* aug = cfg.data.augment ? &cfg.data.augmentation : nullptr;
  const int classes = cfg.network.num_classes;
  NetworkView student_view(*student);

  TrainingRun run;
  std::int64_t step = 0;
  std::vector<std::uint8_t> best_blob;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(ocfg, epoch);
    const double disc_lr = disc ? lr_at_epoch(cfg.discriminator_optim, epoch) : 0.0;
    LossMeans means;
    double objective_sum = 0.0;
    std::int64_t wrong = 0, seen = 0, batches = 0;
    int collapsed_steps = 0, disc_steps_this_epoch = 0;

    for (const auto& indices : minibatches(epoch_order(train.size(), cfg.seed, epoch), cfg.batch_size)) {
      try {
        const Batch batch = make_batch(train, indices, aug, aug ? &augment_rng : nullptr);
        const auto b = static_cast<std::int64_t>(batch.size());
        student_opt.zero_grad();
        if (ctx.hooks.on_step) ctx.hooks.on_step(StepPhase::kBegin, *student, disc.get());

        // (1) student forward and teacher rows.
        const TensorF logits = student->forward(batch.images, Mode::kTrain, student_rng);
        TensorF teacher;
        if (cfg.mode != RunMode::kBaseline) {
          if (live_teacher) {
            NoGradGuard no_grad;
            teacher = live_teacher->logits(batch, Mode::kTrain, teacher_rng).detach();
          } else {
            teacher = store->gather(batch.indices);
          }
        }

        // (2) discriminator step on teacher rows (Real) and detached student logits (Fake).
        if (disc) {
          for (int k = 0; k < cfg.discriminator_steps; ++k) {
            disc_opt->zero_grad();
            const TensorF out = disc->forward(ops::concat<float>({teacher, logits.detach()}, 0), Mode::kTrain, disc_rng);
            const TensorF rf = real_fake_scores(out, classes);
            const TensorF ls = label_scores(out, classes);
            const TensorF la = adversarial_loss(ops::slice(rf, 0, 0, b), ops::slice(rf, 0, b, b));
            const TensorF lds = discriminator_supervised_loss(batch.labels, ops::slice(ls, 0, 0, b), ops::slice(ls, 0, b, b));
            const TensorF obj = discriminator_objective(la, lds);
            ops::scale(obj, -1.0f).backward();  // maximize
            disc_opt->step(disc_lr);
            const double acc = real_fake_accuracy(rf, b);
            ++disc_steps_this_epoch;
            if (acc >= 0.99 || std::fabs(acc - 0.5) <= 0.01) ++collapsed_steps;
            means.add("L_Discriminator", obj.item());
            writer.discriminator_step(step, epoch, la.item(), lds.item(), obj.item(), acc);
          }
          disc_opt->zero_grad();
          if (ctx.hooks.on_step) ctx.hooks.on_step(StepPhase::kAfterDiscriminator, *student, disc.get());
        }

        // (3) student step.
        const TensorF ls_term = supervised_loss(batch.labels, logits);
        TensorF objective;
        switch (cfg.mode) {
          case RunMode::kBaseline:
            objective = ls_term;
            means.add("L_S", ls_term.item());
            break;
          case RunMode::kKd: {
            const TensorF kd = kd_loss(teacher, logits, temperature);
            const double t2 = temperature.value() * temperature.value();
            objective = ops::add(ops::scale(ls_term, 0.5f), ops::scale(kd, static_cast<float>(t2)));
            means.add("L_S", ls_term.item());
            means.add("L_KD", kd.item());
            means.add("L_KD_combined", objective.item());
            break;
          }
          case RunMode::kGan: {
            if (cfg.use_supervised) objective = ls_term;
            means.add("L_S", ls_term.item());
            if (cfg.use_l1) {
              const TensorF l1 = l1_alignment_loss(teacher, logits);
              objective = objective.defined() ? ops::add(objective, l1) : l1;
              means.add("L_L1", l1.item());
            }
            if (disc) {
              // Frozen discriminator: gradients reach it but are discarded, and
              // its running statistics are restored after the forward.
              const ParameterSet<float> dparams = disc->parameters();
              const BufferSnapshot saved = snapshot_buffers(dparams);
              const TensorF out = disc->forward(ops::concat<float>({teacher, logits}, 0), Mode::kTrain, disc_rng);
              restore_buffers(dparams, saved);
              const TensorF rf = real_fake_scores(out, classes);
              const TensorF ls = label_scores(out, classes);
              const TensorF rf_fake = ops::slice(rf, 0, b, b);
              const TensorF la = adversarial_loss(ops::slice(rf, 0, 0, b), rf_fake);
              const TensorF lds = discriminator_supervised_loss(batch.labels, ops::slice(ls, 0, 0, b), ops::slice(ls, 0, b, b));
              const TensorF adv = cfg.adversarial_form == AdversarialForm::kMinimax
                                      ? gan_loss(la, lds)
                                      : ops::scale(ops::sub(non_saturating_adversarial(rf_fake), lds), 0.5f);
              objective = objective.defined() ? ops::add(objective, adv) : adv;
              means.add("L_A", la.item());
              means.add("L_DS", lds.item());
              means.add("L_GAN", adv.item());
            }
            means.add("L_Student", objective.item());
            break;
          }
        }
        const double objective_value = objective.item();
        if (!std::isfinite(objective_value)) throw NumericError("non-finite objective");
        objective.backward();
        student_opt.step(lr);
        if (disc) disc_opt->zero_grad();
        if (ctx.hooks.on_step) ctx.hooks.on_step(StepPhase::kAfterStudent, *student, disc.get());

        objective_sum += objective_value;
        wrong += count_errors(logits, batch.labels);
        seen += b;
        ++batches;
        ++step;
      } catch (const NumericError& e) {
        throw NumericError("training aborted at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           "): " + e.what());
      }
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.train_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(seen);
    record.train_objective = objective_sum / static_cast<double>(batches);
    record.losses = means.report();
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (epoch + 1) % cfg.eval_every == 0) {
      record.test_error = evaluate(student_view, test);
      if (*record.test_error < run.best_test_error || run.best_epoch < 0) {
        run.best_test_error = *record.test_error;
        run.best_epoch = epoch;
        if (writer.enabled()) {
          Checkpoint ck = make_checkpoint(*student);
          ck.header["epoch"] = std::to_string(epoch);
          save_checkpoint(writer.path("best.ckpt"), ck);
        }
      }
    }
    if (disc_steps_this_epoch > 0 && collapsed_steps == disc_steps_this_epoch) {
      record.warnings.push_back("discriminator real/fake accuracy stayed at 100% or 50% for all of epoch " +
                                std::to_string(epoch));
    }
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    writer.epoch(record);
    run.epochs.push_back(std::move(record));
  }
  run.final_test_error = *run.epochs.back().test_error;

  if (writer.enabled()) {
    Checkpoint ck = make_checkpoint(*student);
    ck.header["epoch"] = std::to_string(cfg.epochs - 1);
    if (store) ck.header["teacher"] = store->provenance;
    save_checkpoint(writer.path("final.ckpt"), ck);
    writer.add_artifact(writer.path("best.ckpt"));
    writer.add_artifact(writer.path("final.ckpt"));
    if (disc) {
      save_checkpoint(writer.path("discriminator.ckpt"), make_checkpoint(*disc));
      writer.add_artifact(writer.path("discriminator.ckpt"));
    }
    writer.log("final test error " + format_scalar(run.final_test_error) + " best " +
               format_scalar(run.best_test_error) + " at epoch " + std::to_string(run.best_epoch));
  }
  run.artifacts = writer.artifacts();
  return run;
}

}  // namespace

TrainingRun train_supervised(const ExperimentConfig& cfg, const RunContext& ctx) {
  if (cfg.mode != RunMode::kBaseline) throw ConfigError("train_supervised: experiment.mode must be baseline");
  return run_training(cfg, ctx);
}

TrainingRun train_kd(const ExperimentConfig& cfg, const RunContext& ctx) {
  if (cfg.mode != RunMode::kKd) throw ConfigError("train_kd: experiment.mode must be kd");
  return run_training(cfg, ctx);
}

TrainingRun train_gan(const ExperimentConfig& cfg, const RunContext& ctx) {
  if (cfg.mode != RunMode::kGan) throw ConfigError("train_gan: experiment.mode must be gan");
  return run_training(cfg, ctx);
}

TrainingRun train(const ExperimentConfig& cfg, const RunContext& ctx) { return run_training(cfg, ctx); }

// ---- evaluation -----------------------------------------------------------------

double evaluate(Classifier& model, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  NoGradGuard no_grad;
  Rng unused(0);
  std::int64_t wrong = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto indices = range_indices(start, std::min<std::int64_t>(data.size(), start + batch_size));
    const Batch batch = make_batch(data, indices, nullptr, nullptr);
    wrong += count_errors(model.logits(batch, Mode::kEval, unused), batch.labels);
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

PredictionHistogram prediction_histogram(Classifier& model, const Dataset& data, int class_id, int bins) {
  if (class_id < 0 || class_id >= model.num_classes()) {
    throw std::out_of_range("prediction_histogram: class " + std::to_string(class_id) + " outside [0," +
                            std::to_string(model.num_classes()) + ")");
  }
  if (bins < 1) throw std::invalid_argument("prediction_histogram: bins must be >= 1");
  NoGradGuard no_grad;
  Rng unused(0);
  PredictionHistogram h;
  h.class_id = class_id;
  h.positive.assign(static_cast<std::size_t>(bins), 0.0);
  h.negative.assign(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(static_cast<double>(i) / bins);
  std::int64_t npos = 0, nneg = 0;
  double pos_sum = 0.0, neg_sum = 0.0;
  const Temperature unit(1.0);
  for (std::int64_t start = 0; start < data.size(); start += 250) {
    const auto indices = range_indices(start, std::min<std::int64_t>(data.size(), start + 250));
    const Batch batch = make_batch(data, indices, nullptr, nullptr);
    const TensorF logits = model.logits(batch, Mode::kEval, unused);
    const auto c = static_cast<std::size_t>(logits.dim(1));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = logits.values().subspan(i * c, c);
      const auto q = generalized_softmax(std::vector<double>(row.begin(), row.end()), unit);
      const double p = q[static_cast<std::size_t>(class_id)];
      const auto bin = static_cast<std::size_t>(std::clamp(static_cast<int>(p * bins), 0, bins - 1));
      if (batch.labels[i] == class_id) {
        h.positive[bin] += 1.0;
        pos_sum += p;
        ++npos;
      } else {
        h.negative[bin] += 1.0;
        neg_sum += p;
        ++nneg;
      }
    }
  }
  if (npos == 0) throw std::invalid_argument("prediction_histogram: no images of class " + std::to_string(class_id));
  for (auto& v : h.positive) v /= static_cast<double>(npos);
  if (nneg > 0) {
    for (auto& v : h.negative) v /= static_cast<double>(nneg);
  }
  h.positive_mean = pos_sum / static_cast<double>(npos);
  h.negative_mean = nneg > 0 ? neg_sum / static_cast<double>(nneg) : 0.0;
  return h;
}

void write_histogram_csv(const std::string& path, const PredictionHistogram& hist) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "bin_low,bin_high,positive,negative\n";
  for (std::size_t i = 0; i < hist.positive.size(); ++i) {
    out << format_scalar(hist.edges[i]) << ',' << format_scalar(hist.edges[i + 1]) << ','
        << format_scalar(hist.positive[i]) << ',' << format_scalar(hist.negative[i]) << '\n';
  }
}

double measure_inference_time(WideResNet<float>& net, int batch_size, int repeats) {
  if (batch_size < 1 || repeats < 1) throw std::invalid_argument("measure_inference_time: batch_size and repeats must be >= 1");
  NoGradGuard no_grad;
  Rng rng(12345);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<float> pixels(static_cast<std::size_t>(batch_size) * kImageSize);
  for (auto& v : pixels) v = gauss(rng);
  const TensorF x = TensorF::from(Shape{batch_size, kImageChannels, kImageSide, kImageSide}, std::move(pixels));
  net.forward(x, Mode::kEval, rng);  // warm-up
  std::vector<double> times;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    net.forward(x, Mode::kEval, rng);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  return times[times.size() / 2];
}

}  // namespace kdgan
