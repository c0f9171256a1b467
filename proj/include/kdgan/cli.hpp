#pragma once

#include <string>
#include <vector>

namespace kdgan {

// Exit codes: 0 success, 1 validation error, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitFailure = 2;

int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args[0] is the program name

// Middle order statistic for odd counts, mean of the two middle values otherwise.
double median(std::vector<double> values);

struct SweepVariant {
  std::string label;
  std::vector<std::string> overrides;  // section.key=value
};

// Named grids: temperatures, losses, depths, students.
std::vector<SweepVariant> preset_variants(const std::string& name);
// Cartesian product of "section.key=v1,v2,..." axes.
std::vector<SweepVariant> grid_variants(const std::vector<std::string>& axes);

struct ReportRow {
  std::string variant;
  int runs = 0;
  double median_final = 0.0;
  double median_best = 0.0;
};

// Groups a sweep's results.csv by variant and takes medians over seeds.
std::vector<ReportRow> aggregate_results(const std::string& results_csv);
// Final and best test error read back from a run's metrics.csv.
std::pair<double, double> read_run_errors(const std::string& metrics_csv);

}  // namespace kdgan
