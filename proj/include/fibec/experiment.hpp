#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fibec/config.hpp"
#include "fibec/federation.hpp"

namespace fibec {

inline constexpr const char* kMetricsHeader =
    "round,sampled_ids,train_loss,weighted_test_acc,server_view_acc,bytes_down,bytes_up,wall_ms";

// Floats with 9 significant digits; sampled ids joined with ';'.
void write_metrics_csv(const std::vector<RoundReport>& reports, std::ostream& out);
std::vector<RoundReport> read_metrics_csv(std::istream& in);

// GAL indices and scores, per-device ranks, per-layer rho and popcounts, trainable/frozen totals.
std::string run_summary_json(const ExperimentConfig& cfg, const RunResult& result);

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Runs the experiment and writes metrics.csv and summary.json into out_dir.
int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log);

struct TargetReport {
  double target = 0.0;
  std::optional<std::size_t> rounds_a;  // nullopt = never reached
  std::optional<std::size_t> rounds_b;
};

struct Comparison {
  std::vector<TargetReport> targets;
  double final_acc_a = 0.0;
  double final_acc_b = 0.0;
  double final_acc_delta = 0.0;  // b - a
  std::uint64_t bytes_a = 0;     // down + up over the run
  std::uint64_t bytes_b = 0;
};

// First round whose weighted_test_acc >= target.
std::optional<std::size_t> rounds_to_target(const std::vector<RoundReport>& reports, double target);

Comparison compare_runs(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b,
                        const std::vector<double>& targets);
Comparison compare_runs(std::istream& csv_a, std::istream& csv_b, const std::vector<double>& targets);

// Table rendering; unreached targets print as "/".
void print_comparison(const Comparison& cmp, std::ostream& out);

}  // namespace fibec
