#include "kdgan/cli.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "kdgan/config.hpp"
#include "kdgan/engine.hpp"

namespace kdgan {

namespace fs = std::filesystem;

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string sanitize(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.' && c != '_') c = '_';
  }
  return s;
}

}  // namespace

std::vector<SweepVariant> grid_variants(const std::vector<std::string>& axes) {
  std::vector<SweepVariant> variants{SweepVariant{}};
  for (const auto& axis : axes) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos) throw ConfigError("grid '" + axis + "': expected section.key=v1,v2,...");
    const std::string key = axis.substr(0, eq);
    const auto values = split(axis.substr(eq + 1), ',');
    if (values.empty()) throw ConfigError("grid '" + axis + "': no values");
    const std::string short_key = key.substr(key.find('.') + 1);
    std::vector<SweepVariant> next;
    for (const auto& v : variants) {
      for (const auto& value : values) {
        SweepVariant nv = v;
        nv.label += (nv.label.empty() ? "" : "_") + short_key + "-" + value;
        nv.overrides.push_back(key + "=" + value);
        next.push_back(std::move(nv));
      }
    }
    variants = std::move(next);
  }
  return variants;
}

std::vector<SweepVariant> preset_variants(const std::string& name) {
  if (name == "temperatures") {
    auto v = grid_variants({"kd.temperature=1,2,5,10"});
    for (auto& x : v) x.overrides.insert(x.overrides.begin(), "experiment.mode=kd");
    return v;
  }
  if (name == "losses") {
    auto flags = [](const char* label, bool ls, bool l1, bool gan) {
      auto on = [](bool b) { return std::string(b ? "true" : "false"); };
      return SweepVariant{label,
                          {"experiment.mode=gan", "gan.use_supervised=" + on(ls), "gan.use_l1=" + on(l1),
                           "gan.use_adversarial=" + on(gan)}};
    };
    return {flags("LS", true, false, false), flags("GAN", false, false, true), flags("LS+GAN", true, false, true),
            flags("LS+L1", true, true, false), flags("LS+L1+GAN", true, true, true)};
  }
  if (name == "depths") {
    auto v = grid_variants({"gan.discriminator_depth=1,2,3,4"});
    for (auto& x : v) x.overrides.insert(x.overrides.begin(), "experiment.mode=gan");
    return v;
  }
  if (name == "students") {
    std::vector<SweepVariant> out;
    for (const auto& [d, w] : std::vector<std::pair<int, int>>{{10, 2}, {10, 4}, {16, 4}, {34, 4}}) {
      out.push_back({"WRN-" + std::to_string(d) + "-" + std::to_string(w),
                     {"network.depth=" + std::to_string(d), "network.widen=" + std::to_string(w)}});
    }
    return out;
  }
  throw ConfigError("unknown preset '" + name + "' (temperatures, losses, depths, students)");
}

std::pair<double, double> read_run_errors(const std::string& metrics_csv) {
  std::ifstream in(metrics_csv);
  if (!in) throw std::runtime_error("cannot read " + metrics_csv);
  std::string line;
  std::getline(in, line);
  double final_error = -1.0, best = 1e300;
  while (std::getline(in, line)) {
    const auto fields = split(line, ',');
    if (fields.size() < 4 || fields[3].empty()) continue;
    const double e = std::stod(fields[3]);
    final_error = e;
    best = std::min(best, e);
  }
  if (final_error < 0) throw std::runtime_error(metrics_csv + ": no evaluated epochs");
  return {final_error, best};
}

std::vector<ReportRow> aggregate_results(const std::string& results_csv) {
  std::ifstream in(results_csv);
  if (!in) throw std::runtime_error("cannot read " + results_csv);
  std::string line;
  std::getline(in, line);
  const auto header = split(line, ',');
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error(results_csv + ": missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cv = column("variant"), cf = column("final_test_error"), cb = column("best_test_error");
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() <= std::max({cv, cf, cb})) throw std::runtime_error(results_csv + ": short row '" + line + "'");
    if (!groups.count(f[cv])) order.push_back(f[cv]);
    groups[f[cv]].first.push_back(std::stod(f[cf]));
    groups[f[cv]].second.push_back(std::stod(f[cb]));
  }
  std::vector<ReportRow> rows;
  for (const auto& v : order) {
    const auto& [finals, bests] = groups[v];
    rows.push_back({v, static_cast<int>(finals.size()), median(finals), median(bests)});
  }
  return rows;
}

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool overwrite = false;
  bool verbose = false;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file " + path + " not found");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ExperimentConfig resolve_config(const Common& c, std::vector<std::string> extra = {}) {
  const std::string text = c.config.empty() ? std::string() : read_text(c.config);
  std::vector<std::string> overrides = std::move(extra);
  overrides.insert(overrides.end(), c.sets.begin(), c.sets.end());
  if (c.seed) overrides.push_back("experiment.seed=" + std::to_string(*c.seed));
  return parse_config(text, overrides);
}

void prepare_output_dir(const std::string& dir, bool overwrite) {
  if (dir.empty()) throw ConfigError("--out: output directory required");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError("--out: " + dir + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!overwrite) throw ConfigError("--out: " + dir + " is not empty (pass --overwrite to replace it)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void print_artifacts(const std::vector<std::string>& artifacts) {
  std::string line = "artifacts:";
  for (const auto& a : artifacts) line += " " + a;
  std::cout << line << std::endl;
}

TrainingRun run_experiment(const ExperimentConfig& cfg, const std::string& dir, bool verbose) {
  RunContext ctx;
  ctx.output_dir = dir;
  ctx.quiet = !verbose;
  return train(cfg, ctx);
}

int cmd_train(const Common& c, bool teacher) {
  ExperimentConfig cfg = resolve_config(c, teacher ? std::vector<std::string>{"experiment.mode=baseline"}
                                                   : std::vector<std::string>{});
  prepare_output_dir(c.out, c.overwrite);
  const TrainingRun run = run_experiment(cfg, c.out, c.verbose);
  std::printf("final test error %.2f%% (best %.2f%% at epoch %d)\n", run.final_test_error, run.best_test_error,
              run.best_epoch);
  print_artifacts(run.artifacts);
  return kExitOk;
}

int cmd_export(const Common& c, const std::string& checkpoint, int batch_size) {
  if (!fs::exists(checkpoint)) throw MissingArtifactError("teacher checkpoint " + checkpoint + " not found; run train-teacher first");
  ExperimentConfig cfg = resolve_config(c);
  if (c.out.empty()) throw ConfigError("--out: logits store path required");
  auto teacher = load_classifier(checkpoint);
  const DataSplits data = load_data(cfg.data);
  const TeacherLogitsStore store =
      export_teacher_logits(*teacher, data.train, batch_size, "checkpoint=" + fs::absolute(checkpoint).string() +
                                                                  " arch=" + teacher->describe());
  if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
  save_logits_store(c.out, store);
  std::printf("exported %lld x %d teacher logits\n", static_cast<long long>(store.size), store.num_classes);
  print_artifacts({c.out, c.out + ".provenance"});
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::optional<int> hist_class, int bins,
             const std::string& hist_out, int timing_batch, int timing_repeats) {
  if (!fs::exists(checkpoint)) throw MissingArtifactError("checkpoint " + checkpoint + " not found");
  auto model = load_classifier(checkpoint);
  std::vector<std::string> extra;
  if (c.config.empty()) extra.push_back("data.num_classes=" + std::to_string(model->num_classes()));
  ExperimentConfig cfg = resolve_config(c, extra);
  if (cfg.data.num_classes != model->num_classes()) {
    throw ConfigError("checkpoint predicts " + std::to_string(model->num_classes()) + " classes but data.num_classes is " +
                      std::to_string(cfg.data.num_classes));
  }
  const DataSplits data = load_data(cfg.data);
  const double error = evaluate(*model, data.test);
  std::printf("test error %.2f%%\n", error);
  std::vector<std::string> artifacts;
  if (hist_class) {
    const PredictionHistogram h = prediction_histogram(*model, data.test, *hist_class, bins);
    const std::string path = hist_out.empty() ? "histogram_class" + std::to_string(*hist_class) + ".csv" : hist_out;
    write_histogram_csv(path, h);
    std::printf("class %d mean probability: positive %.4f negative %.4f\n", *hist_class, h.positive_mean, h.negative_mean);
    artifacts.push_back(path);
  }
  if (timing_repeats > 0) {
    auto* net = dynamic_cast<NetworkClassifier*>(model.get());
    if (!net) throw ConfigError("--time: inference timing needs a network checkpoint");
    const double secs = measure_inference_time(net->network(), timing_batch, timing_repeats);
    std::printf("inference %.6f s per batch of %d (median of %d)\n", secs, timing_batch, timing_repeats);
  }
  print_artifacts(artifacts);
  return kExitOk;
}

int cmd_make_stub(const std::string& kind, int classes, const std::string& out) {
  if (kind != "oracle" && kind != "constant") throw ConfigError("--kind: expected oracle or constant");
  if (classes < 2) throw ConfigError("--classes: must be >= 2");
  Checkpoint ck;
  ck.header["arch"] = kind + "-stub";
  ck.header["num_classes"] = std::to_string(classes);
  if (kind == "constant") ck.tensors.push_back({"row", Shape{classes}, std::vector<float>(static_cast<std::size_t>(classes), 0.0f)});
  save_checkpoint(out, ck);
  print_artifacts({out});
  return kExitOk;
}

int cmd_sweep(const Common& c, const std::string& preset, const std::vector<std::string>& grid,
              const std::vector<std::uint64_t>& seeds, int jobs) {
  std::vector<SweepVariant> variants;
  if (!preset.empty()) variants = preset_variants(preset);
  if (!grid.empty()) {
    const auto g = grid_variants(grid);
    if (variants.empty()) {
      variants = g;
    } else {
      std::vector<SweepVariant> product;
      for (const auto& a : variants) {
        for (const auto& b : g) {
          SweepVariant v = a;
          v.label += "_" + b.label;
          v.overrides.insert(v.overrides.end(), b.overrides.begin(), b.overrides.end());
          product.push_back(std::move(v));
        }
      }
      variants = std::move(product);
    }
  }
  if (variants.empty()) throw ConfigError("sweep: pass --preset and/or --grid");
  if (jobs < 1) throw ConfigError("--jobs: must be >= 1");

  struct Job {
    SweepVariant variant;
    std::uint64_t seed;
    ExperimentConfig cfg;
    std::string dir;
  };
  std::vector<Job> plan;
  const std::vector<std::uint64_t> seed_list = seeds.empty() ? std::vector<std::uint64_t>{c.seed.value_or(1)} : seeds;
  for (const auto& v : variants) {
    for (auto seed : seed_list) {
      Common sc = c;
      sc.seed = seed;
      Job job{v, seed, resolve_config(sc, v.overrides), ""};  // validate everything before starting
      job.dir = (fs::path(c.out) / (sanitize(v.label) + "_seed-" + std::to_string(seed))).string();
      plan.push_back(std::move(job));
    }
  }
  prepare_output_dir(c.out, c.overwrite);

  auto run_one = [&](const Job& job) {
    fs::create_directories(job.dir);
    run_experiment(job.cfg, job.dir, c.verbose);
  };
  if (jobs == 1) {
    for (const auto& job : plan) {
      std::printf("running %s seed %llu\n", job.variant.label.c_str(), static_cast<unsigned long long>(job.seed));
      std::fflush(stdout);
      run_one(job);
    }
  } else {
    std::size_t next = 0;
    int running = 0, failures = 0;
    while (next < plan.size() || running > 0) {
      while (running < jobs && next < plan.size()) {
        std::fflush(stdout);
        const pid_t pid = fork();
        if (pid < 0) throw std::runtime_error("sweep: fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            run_one(plan[next]);
          } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s: %s\n", plan[next].dir.c_str(), e.what());
            code = kExitFailure;
          }
          std::fflush(nullptr);
          _exit(code);
        }
        ++next;
        ++running;
      }
      int status = 0;
      if (wait(&status) > 0) {
        --running;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
      }
    }
    if (failures) throw std::runtime_error("sweep: " + std::to_string(failures) + " run(s) failed");
  }

  const std::string results = (fs::path(c.out) / "results.csv").string();
  std::ofstream out(results);
  out << "variant,seed,final_test_error,best_test_error,run_dir\n";
  for (const auto& job : plan) {
    const auto [final_error, best] = read_run_errors((fs::path(job.dir) / "metrics.csv").string());
    out << job.variant.label << ',' << job.seed << ',' << format_scalar(final_error) << ',' << format_scalar(best) << ','
        << job.dir << '\n';
  }
  out.close();
  std::vector<std::string> artifacts{results};
  for (const auto& job : plan) artifacts.push_back(job.dir);
  print_artifacts(artifacts);
  return kExitOk;
}

int cmd_report(const std::string& sweep_dir, const std::string& out) {
  const std::string results = (fs::path(sweep_dir) / "results.csv").string();
  if (!fs::exists(results)) throw MissingArtifactError(results + " not found; run sweep first");
  const auto rows = aggregate_results(results);
  const std::string path = out.empty() ? (fs::path(sweep_dir) / "summary.csv").string() : out;
  std::ofstream csv(path);
  csv << "variant,runs,median_final_test_error,median_best_test_error\n";
  std::printf("%-28s %5s %12s %12s\n", "variant", "runs", "final err %", "best err %");
  for (const auto& r : rows) {
    csv << r.variant << ',' << r.runs << ',' << format_scalar(r.median_final) << ',' << format_scalar(r.median_best) << '\n';
    std::printf("%-28s %5d %12.2f %12.2f\n", r.variant.c_str(), r.runs, r.median_final, r.median_best);
  }
  print_artifacts({path});
  return kExitOk;
}

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
  cmd->add_option("-c,--config", c.config, "experiment file");
  if (with_out) cmd->add_option("-o,--out", c.out, "output path");
  cmd->add_option("--set", c.sets, "override, section.key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "seed override");
  cmd->add_flag("-v,--verbose", c.verbose, "log every epoch to stderr");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"kdgan: knowledge distillation with a learned adversarial loss"};
  app.require_subcommand(1);
  Common c;

  auto* teacher = app.add_subcommand("train-teacher", "train a network with the supervised loss");
  add_common(teacher, c);
  teacher->add_flag("--overwrite", c.overwrite, "replace a non-empty output directory");

  std::string checkpoint;
  int export_batch = 250;
  auto* exp = app.add_subcommand("export-logits", "cache a teacher's eval-mode logits for the training split");
  add_common(exp, c);
  exp->add_option("--checkpoint", checkpoint, "teacher checkpoint")->required();
  exp->add_option("--batch-size", export_batch, "forward batch size");

  auto* student = app.add_subcommand("train-student", "train a student in baseline, kd or gan mode");
  add_common(student, c);
  student->add_flag("--overwrite", c.overwrite, "replace a non-empty output directory");

  std::optional<int> hist_class;
  int bins = 20, timing_batch = 100, timing_repeats = 0;
  std::string hist_out;
  auto* ev = app.add_subcommand("eval", "test error of a checkpoint");
  add_common(ev, c, false);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--histogram-class", hist_class, "emit the prediction histogram for this class");
  ev->add_option("--bins", bins, "histogram bins");
  ev->add_option("--histogram-out", hist_out, "histogram CSV path");
  ev->add_option("--time-batch", timing_batch, "inference timing batch size");
  ev->add_option("--time-repeats", timing_repeats, "timed forwards (0 disables timing)");

  std::string preset;
  std::vector<std::string> grid;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  add_common(sweep, c);
  sweep->add_flag("--overwrite", c.overwrite, "replace a non-empty output directory");
  sweep->add_option("--preset", preset, "temperatures | losses | depths | students");
  sweep->add_option("--grid", grid, "axis section.key=v1,v2,... (repeatable)");
  sweep->add_option("--seeds", seeds, "seed list")->delimiter(',');
  sweep->add_option("--jobs", jobs, "parallel processes");

  std::string sweep_dir, report_out;
  auto* report = app.add_subcommand("report", "median-over-seeds summary of a sweep");
  report->add_option("sweep_dir", sweep_dir, "sweep output directory")->required();
  report->add_option("-o,--out", report_out, "summary CSV path");

  std::string stub_kind = "oracle", stub_out;
  int stub_classes = 10;
  auto* stub = app.add_subcommand("make-stub", "write a stub model checkpoint (oracle or constant)");
  stub->add_option("--kind", stub_kind, "oracle | constant");
  stub->add_option("--classes", stub_classes, "number of classes");
  stub->add_option("-o,--out", stub_out, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (teacher->parsed()) return cmd_train(c, true);
    if (exp->parsed()) return cmd_export(c, checkpoint, export_batch);
    if (student->parsed()) return cmd_train(c, false);
    if (ev->parsed()) return cmd_eval(c, checkpoint, hist_class, bins, hist_out, timing_batch, timing_repeats);
    if (sweep->parsed()) return cmd_sweep(c, preset, grid, seeds, jobs);
    if (report->parsed()) return cmd_report(sweep_dir, report_out);
    if (stub->parsed()) return cmd_make_stub(stub_kind, stub_classes, stub_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInvalid;
  } catch (const MissingArtifactError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitInvalid;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace kdgan
