#include "fibec/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "fibec/errors.hpp"
#include "json.hpp"

namespace fibec {

namespace {

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

}  // namespace

void write_metrics_csv(const std::vector<RoundReport>& reports, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& r : reports) {
    out << r.round << ',';
    for (std::size_t i = 0; i < r.sampled.size(); ++i) out << (i ? ";" : "") << r.sampled[i];
    out << ',' << fmt9(r.train_loss) << ',' << fmt9(r.weighted_test_acc) << ',' << fmt9(r.server_view_acc)
        << ',' << r.bytes_down << ',' << r.bytes_up << ',' << r.wall_ms << '\n';
  }
}

std::vector<RoundReport> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw ContractViolation("metrics CSV schema mismatch: header is '" + line + "'");
  std::vector<RoundReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = split_on(line, ',');
    if (cols.size() != 8)
      throw ContractViolation("metrics CSV line " + std::to_string(lineno) + ": expected 8 columns");
    try {
      RoundReport r;
      r.round = std::stoull(cols[0]);
      if (!cols[1].empty())
        for (const auto& id : split_on(cols[1], ';')) r.sampled.push_back(std::stoull(id));
      r.train_loss = std::stod(cols[2]);
      r.weighted_test_acc = std::stod(cols[3]);
      r.server_view_acc = std::stod(cols[4]);
      r.bytes_down = std::stoull(cols[5]);
      r.bytes_up = std::stoull(cols[6]);
      r.wall_ms = std::stoull(cols[7]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ContractViolation("metrics CSV line " + std::to_string(lineno) + ": malformed value");
    }
  }
  return out;
}

std::string run_summary_json(const ExperimentConfig& cfg, const RunResult& result) {
  using nlohmann::json;
  const auto& gal = result.server.gal;
  json doc;
  doc["mode"] = std::string(to_string(cfg.mode));
  doc["seed"] = cfg.seed;
  doc["rounds"] = cfg.rounds;
  doc["gal"] = {{"layers", gal.layers},
                {"n_star", gal.n_star},
                {"mu", gal.mu},
                {"global_scores", gal.global_scores}};
  doc["init_eval"] = {{"weighted_test_acc", result.init_eval.weighted_test_acc},
                      {"server_view_acc", result.init_eval.server_view_acc}};

  std::size_t trainable = 0;
  std::size_t frozen = 0;
  json devices = json::array();
  for (const auto& dev : result.devices) {
    const ParamCount pc = masked_param_count(dev.net, gal, dev.mask);
    trainable += pc.trainable;
    frozen += pc.frozen;
    json layers = json::array();
    for (std::size_t l = 0; l < dev.net.num_layers(); ++l) {
      json entry = {{"layer", l}, {"gal", gal.contains(l)}};
      if (dev.ratios[l]) {
        entry["rho"] = dev.ratios[l]->rho;
        entry["r"] = dev.ratios[l]->r;
        entry["rank"] = dev.ratios[l]->rank;
      }
      if (dev.mask[l]) entry["popcount"] = std::count(dev.mask[l]->begin(), dev.mask[l]->end(), true);
      layers.push_back(entry);
    }
    devices.push_back({{"id", dev.id},
                       {"n_k", dev.n_k()},
                       {"n_test", dev.test.size()},
                       {"r", dev.lossless.r},
                       {"hessian_rank", dev.lossless.rank},
                       {"lipschitz", dev.lossless.lipschitz},
                       {"layer_scores", dev.layer_scores},
                       {"trainable", pc.trainable},
                       {"frozen", pc.frozen},
                       {"layers", layers}});
  }
  doc["devices"] = devices;
  doc["totals"] = {{"trainable", trainable}, {"frozen", frozen}};
  std::uint64_t down = 0;
  std::uint64_t up = 0;
  for (const auto& r : result.reports) {
    down += r.bytes_down;
    up += r.bytes_up;
  }
  doc["bytes"] = {{"down", down}, {"up", up}};
  if (!result.reports.empty()) doc["final_weighted_test_acc"] = result.reports.back().weighted_test_acc;
  return doc.dump(2) + "\n";
}

int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log) {
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const RunResult result = run(cfg);
    {
      std::ofstream csv(fs::path(out_dir) / "metrics.csv", std::ios::binary);
      if (!csv) throw std::runtime_error("cannot write metrics.csv in " + out_dir);
      write_metrics_csv(result.reports, csv);
    }
    {
      std::ofstream summary(fs::path(out_dir) / "summary.json", std::ios::binary);
      if (!summary) throw std::runtime_error("cannot write summary.json in " + out_dir);
      summary << run_summary_json(cfg, result);
    }
    log << "mode " << to_string(cfg.mode) << ", GAL layers " << result.server.gal.layers.size() << "/"
        << result.server.reference.num_layers();
    if (!result.reports.empty())
      log << ", final weighted accuracy " << fmt9(result.reports.back().weighted_test_acc);
    log << '\n';
    return kExitOk;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

std::optional<std::size_t> rounds_to_target(const std::vector<RoundReport>& reports, double target) {
  for (const auto& r : reports)
    if (r.weighted_test_acc >= target) return r.round;
  return std::nullopt;
}

Comparison compare_runs(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b,
                        const std::vector<double>& targets) {
  Comparison cmp;
  for (double t : targets) cmp.targets.push_back({t, rounds_to_target(a, t), rounds_to_target(b, t)});
  cmp.final_acc_a = a.empty() ? 0.0 : a.back().weighted_test_acc;
  cmp.final_acc_b = b.empty() ? 0.0 : b.back().weighted_test_acc;
  cmp.final_acc_delta = cmp.final_acc_b - cmp.final_acc_a;
  for (const auto& r : a) cmp.bytes_a += r.bytes_down + r.bytes_up;
  for (const auto& r : b) cmp.bytes_b += r.bytes_down + r.bytes_up;
  return cmp;
}

Comparison compare_runs(std::istream& csv_a, std::istream& csv_b, const std::vector<double>& targets) {
  return compare_runs(read_metrics_csv(csv_a), read_metrics_csv(csv_b), targets);
}

void print_comparison(const Comparison& cmp, std::ostream& out) {
  auto rounds = [](const std::optional<std::size_t>& r) { return r ? std::to_string(*r) : std::string("/"); };
  out << "target,rounds_a,rounds_b\n";
  for (const auto& t : cmp.targets) out << fmt9(t.target) << ',' << rounds(t.rounds_a) << ',' << rounds(t.rounds_b) << '\n';
  out << "final_acc_a," << fmt9(cmp.final_acc_a) << '\n'
      << "final_acc_b," << fmt9(cmp.final_acc_b) << '\n'
      << "final_acc_delta," << fmt9(cmp.final_acc_delta) << '\n'
      << "bytes_a," << cmp.bytes_a << '\n'
      << "bytes_b," << cmp.bytes_b << '\n';
}

}  // namespace fibec
