#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "kdgan/config.hpp"
#include "kdgan/engine.hpp"
#include "support.hpp"

using namespace kdgan;
using kdgan::testing::read_text;
using kdgan::testing::scratch_dir;

namespace {

ExperimentConfig small_config(RunMode mode, int epochs = 2) {
  ExperimentConfig cfg;
  cfg.mode = mode;
  cfg.data.train_size = 96;
  cfg.data.test_size = 40;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.optim = cfg.optim.rescaled(200, epochs);
  cfg.discriminator_optim = cfg.discriminator_optim.rescaled(200, epochs);
  cfg.discriminator.depth = 2;
  cfg.logits_path = "unused";
  return cfg;
}

std::uint64_t checksum(const ParameterSet<float>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params.trainable) {
    for (float v : p.tensor.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 1099511628211ULL;
    }
  }
  return h;
}

bool all_grads_zero(const ParameterSet<float>& params) {
  for (const auto& p : params.trainable) {
    for (float g : p.tensor.grad()) {
      if (g != 0.0f) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("evaluate gives 0% for the oracle and chance for a constant") {
  const DataSplits data = load_data(small_config(RunMode::kBaseline).data);
  OracleStub oracle(10);
  CHECK(evaluate(oracle, data.test) == 0.0);
  std::vector<float> row(10, 0.0f);
  row[3] = 1.0f;
  ConstantStub constant(row);
  const auto hits = std::count(data.test.labels.begin(), data.test.labels.end(), 3);
  CHECK(evaluate(constant, data.test) == doctest::Approx(100.0 * (40 - hits) / 40.0));

  // Balanced set: error is exactly 100(C-1)/C.
  Dataset balanced = data.test.head(10);
  for (int i = 0; i < 10; ++i) balanced.labels[static_cast<std::size_t>(i)] = i;
  CHECK(evaluate(constant, balanced, 3) == doctest::Approx(90.0));
}

TEST_CASE("lr0 = 0 leaves trainable parameters bit-identical") {
  ExperimentConfig cfg = small_config(RunMode::kBaseline, 1);
  cfg.optim.lr0 = 0.0;
  std::uint64_t first = 0, last = 0;
  RunContext ctx;
  ctx.hooks.on_step = [&](StepPhase phase, const WideResNet<float>& s, const Discriminator<float>*) {
    if (phase == StepPhase::kBegin && first == 0) first = checksum(s.parameters());
    if (phase == StepPhase::kAfterStudent) last = checksum(s.parameters());
  };
  train(cfg, ctx);
  CHECK(first != 0);
  CHECK(first == last);
}

TEST_CASE("runs are deterministic down to the metrics bytes") {
  for (RunMode mode : {RunMode::kBaseline, RunMode::kGan}) {
    const auto dir = scratch_dir("determinism");
    ExperimentConfig cfg = small_config(mode);
    const DataSplits data = load_data(cfg.data);
    OracleStub teacher(10, 4.0f);
    const TeacherLogitsStore store = export_teacher_logits(teacher, data.train, 50, "oracle");
    std::string metrics[2], disc[2];
    for (int r = 0; r < 2; ++r) {
      RunContext ctx;
      ctx.output_dir = dir + "/run" + std::to_string(r);
      ctx.logits = &store;
      train(cfg, ctx);
      metrics[r] = read_text(ctx.output_dir + "/metrics.csv");
      disc[r] = read_text(ctx.output_dir + "/losses.csv");
    }
    CHECK_FALSE(metrics[0].empty());
    CHECK(metrics[0] == metrics[1]);
    CHECK(disc[0] == disc[1]);
  }
}

TEST_CASE("gan mode with only the supervised term reproduces the baseline") {
  const auto dir = scratch_dir("degeneracy");
  ExperimentConfig base = small_config(RunMode::kBaseline);
  ExperimentConfig gan = small_config(RunMode::kGan);
  gan.use_l1 = false;
  gan.use_adversarial = false;
  const DataSplits data = load_data(base.data);
  OracleStub teacher(10);
  const TeacherLogitsStore store = export_teacher_logits(teacher, data.train, 50, "oracle");
  RunContext a, b;
  a.output_dir = dir + "/base";
  b.output_dir = dir + "/gan";
  b.logits = &store;
  train(base, a);
  train(gan, b);
  const std::string ma = read_text(a.output_dir + "/metrics.csv");
  CHECK_FALSE(ma.empty());
  CHECK(ma == read_text(b.output_dir + "/metrics.csv"));
  // Headers record the mode, so only the tensors are compared.
  const Checkpoint ca = load_checkpoint(a.output_dir + "/final.ckpt");
  const Checkpoint cb = load_checkpoint(b.output_dir + "/final.ckpt");
  REQUIRE(ca.tensors.size() == cb.tensors.size());
  for (std::size_t i = 0; i < ca.tensors.size(); ++i) {
    CHECK(ca.tensors[i].name == cb.tensors[i].name);
    CHECK(ca.tensors[i].values == cb.tensors[i].values);
  }
}

TEST_CASE("a student started from its teacher has zero distillation loss") {
  const auto dir = scratch_dir("selfdistill");
  ExperimentConfig cfg = small_config(RunMode::kKd, 1);
  cfg.network.dropout = 0.0;
  auto teacher = build_wrn<float>(cfg.network, 77);
  const std::string ckpt = dir + "/teacher.ckpt";
  save_checkpoint(ckpt, make_checkpoint(*teacher));
  cfg.init_checkpoint = ckpt;
  cfg.teacher_checkpoint = ckpt;
  cfg.teacher_on_the_fly = true;
  cfg.optim.lr0 = 0.0;
  const TrainingRun run = train(cfg, {});
  CHECK(*run.epochs[0].losses.get("L_KD") == doctest::Approx(0.0).scale(1.0).epsilon(1e-5));
}

TEST_CASE("the discriminator and student updates never touch each other") {
  ExperimentConfig cfg = small_config(RunMode::kGan, 1);
  const DataSplits data = load_data(cfg.data);
  OracleStub teacher(10, 5.0f);
  const TeacherLogitsStore store = export_teacher_logits(teacher, data.train, 50, "oracle");
  std::uint64_t student_begin = 0, disc_mid = 0;
  int steps = 0, violations = 0;
  RunContext ctx;
  ctx.logits = &store;
  ctx.hooks.on_step = [&](StepPhase phase, const WideResNet<float>& s, const Discriminator<float>* d) {
    REQUIRE(d != nullptr);
    switch (phase) {
      case StepPhase::kBegin:
        student_begin = checksum(s.parameters());
        break;
      case StepPhase::kAfterDiscriminator:
        if (checksum(s.parameters()) != student_begin) ++violations;
        if (!all_grads_zero(s.parameters())) ++violations;  // fake logits were detached
        disc_mid = checksum(d->parameters());
        break;
      case StepPhase::kAfterStudent:
        if (checksum(d->parameters()) != disc_mid) ++violations;
        if (checksum(s.parameters()) == student_begin) ++violations;
        ++steps;
        break;
    }
  };
  train(cfg, ctx);
  CHECK(steps == 3);
  CHECK(violations == 0);
}

TEST_CASE("L1 alignment pulls student logits toward a constant teacher") {
  ExperimentConfig cfg = small_config(RunMode::kGan, 5);
  cfg.use_adversarial = false;
  cfg.use_supervised = false;
  cfg.network.dropout = 0.0;
  cfg.optim.milestones = {};
  const DataSplits data = load_data(cfg.data);
  ConstantStub teacher({6, -4, 2, 0, -2, 5, -6, 3, 1, -5});
  const TeacherLogitsStore store = export_teacher_logits(teacher, data.train, 50, "constant");
  RunContext ctx;
  ctx.logits = &store;
  const TrainingRun run = train(cfg, ctx);
  REQUIRE(run.epochs.size() == 5);
  for (int e = 1; e < 5; ++e) CHECK(*run.epochs[e].losses.get("L_L1") < *run.epochs[e - 1].losses.get("L_L1"));
}

TEST_CASE("run directory holds the documented artifacts") {
  const auto dir = scratch_dir("artifacts");
  ExperimentConfig cfg = small_config(RunMode::kGan);
  const DataSplits data = load_data(cfg.data);
  OracleStub teacher(10, 5.0f);
  const TeacherLogitsStore store = export_teacher_logits(teacher, data.train, 50, "oracle");
  RunContext ctx;
  ctx.output_dir = dir;
  ctx.logits = &store;
  const TrainingRun run = train(cfg, ctx);
  for (const char* name : {"config.ini", "metrics.csv", "losses.csv", "timing.csv", "log.txt", "discriminator.csv",
                           "best.ckpt", "final.ckpt", "discriminator.ckpt"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir + "/" + name), name);
  }
  const std::string metrics = read_text(dir + "/metrics.csv");
  CHECK(metrics.rfind("epoch,lr,train_error,test_error,train_objective\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
  const std::string disc_log = read_text(dir + "/discriminator.csv");
  CHECK(std::count(disc_log.begin(), disc_log.end(), '\n') == 1 + 2 * 3);
  for (const auto& e : run.epochs) {
    CHECK(e.train_error >= 0.0);
    CHECK(e.train_error <= 100.0);
    for (const char* k : {"L_S", "L_L1", "L_A", "L_DS", "L_GAN", "L_Student", "L_Discriminator"}) CHECK(e.losses.has(k));
  }
  // The stored config reproduces the run's settings.
  const ExperimentConfig back = load_config(dir + "/config.ini");
  CHECK(render_config(back) == render_config(cfg));
  // The final checkpoint evaluates to the reported final error.
  auto reloaded = load_classifier(dir + "/final.ckpt");
  CHECK(evaluate(*reloaded, data.test) == run.final_test_error);
}

TEST_CASE("missing teacher artifacts produce actionable errors") {
  ExperimentConfig cfg = small_config(RunMode::kGan, 1);
  cfg.logits_path = "/nonexistent/teacher.logits";
  try {
    train(cfg, {});
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    CHECK(std::string(e.what()).find("export-logits") != std::string::npos);
  }
  cfg.logits_path.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("misaligned stores are rejected before training") {
  ExperimentConfig cfg = small_config(RunMode::kKd, 1);
  TeacherLogitsStore store;
  store.num_classes = 10;
  store.size = 95;
  store.rows.assign(950, 0.0f);
  RunContext ctx;
  ctx.logits = &store;
  bool stepped = false;
  ctx.hooks.on_step = [&](StepPhase, const WideResNet<float>&, const Discriminator<float>*) { stepped = true; };
  CHECK_THROWS(train(cfg, ctx));
  CHECK_FALSE(stepped);
}

TEST_CASE("config validation names the field") {
  ExperimentConfig cfg = small_config(RunMode::kBaseline);
  cfg.epochs = 0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("epochs") != std::string::npos);
  }
  cfg = small_config(RunMode::kKd);
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config(RunMode::kGan);
  cfg.use_supervised = cfg.use_l1 = cfg.use_adversarial = false;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config text round trips through render and parse") {
  const ExperimentConfig cfg = parse_config(
      "[experiment]\nmode = gan\nepochs = 7\nseed = 3\n[kd]\ntemperature = 2.5\n[gan]\nuse_l1 = false\n"
      "discriminator_depth = 4\n[teacher]\nlogits = t.logits\n",
      {"optim.lr0=0.05", "data.difficulty=0.3"});
  CHECK(cfg.mode == RunMode::kGan);
  CHECK(cfg.epochs == 7);
  CHECK(cfg.optim.lr0 == 0.05);
  CHECK(cfg.data.difficulty == 0.3);
  CHECK(cfg.discriminator.depth == 4);
  CHECK_FALSE(cfg.use_l1);
  CHECK(cfg.optim.milestones == std::vector<int>{3, 6});
  CHECK(cfg.discriminator_optim.lr0 == 1e-3);
  const std::string text = render_config(cfg);
  CHECK(render_config(parse_config(text)) == text);
  CHECK_THROWS_AS(parse_config("[experiment]\nepohcs = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[nonsense]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("", {"experiment.mode=distill"}), ConfigError);
}

TEST_CASE("prediction histograms are normalized per population") {
  const DataSplits data = load_data(small_config(RunMode::kBaseline).data);
  OracleStub oracle(10);
  const int cls = data.test.labels[0];
  const PredictionHistogram h = prediction_histogram(oracle, data.test, cls, 10);
  CHECK(std::accumulate(h.positive.begin(), h.positive.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::accumulate(h.negative.begin(), h.negative.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(h.positive.back() == doctest::Approx(1.0));
  CHECK(h.negative.front() == doctest::Approx(1.0));
  CHECK(h.positive_mean > h.negative_mean);
  CHECK(h.edges.size() == 11);

  const auto dir = scratch_dir("histogram");
  write_histogram_csv(dir + "/h.csv", h);
  const std::string csv = read_text(dir + "/h.csv");
  CHECK(csv.rfind("bin_low,bin_high,positive,negative\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);

  Dataset none = data.test;
  for (auto& l : none.labels) l = (l == 9) ? 8 : l;
  CHECK_THROWS(prediction_histogram(oracle, none, 9, 10));
  CHECK_THROWS(prediction_histogram(oracle, data.test, 10, 10));
}

TEST_CASE("inference timing is positive and tracks model size") {
  auto small = build_wrn<float>({10, 1, 10}, 1);
  auto large = build_wrn<float>({16, 4, 10}, 1);
  const double one = measure_inference_time(*small, 4, 1);
  const double nine = measure_inference_time(*small, 4, 9);
  CHECK(one > 0.0);
  CHECK(nine > 0.0);
  CHECK(measure_inference_time(*large, 4, 3) > measure_inference_time(*small, 4, 3));
  // Per-sample cost should not grow with the batch. Activations at batch 100
  // spill out of L2 and the host is shared, hence the 25% allowance.
  const double per_sample_1 = measure_inference_time(*small, 1, 41);
  const double per_sample_100 = measure_inference_time(*small, 100, 5) / 100.0;
  CHECK(per_sample_100 <= per_sample_1 * 1.25);
}
