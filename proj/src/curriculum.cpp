#include "fibec/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fibec/errors.hpp"

namespace fibec {

Pace parse_pace(std::string_view name) {
  if (name == "linear") return Pace::linear;
  if (name == "sqrt") return Pace::sqrt;
  if (name == "exp") return Pace::exp;
  throw ConfigError("unknown pace '" + std::string(name) + "' (expected linear, sqrt or exp)", "pace");
}

std::string_view to_string(Pace pace) {
  switch (pace) {
    case Pace::linear: return "linear";
    case Pace::sqrt: return "sqrt";
    case Pace::exp: return "exp";
  }
  return "linear";
}

void PacingConfig::validate() const {
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must be in (0, 1]", "beta");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in (0, 1]", "alpha");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "batch_size");
  if (total_rounds < 1) throw ConfigError("total rounds must be >= 1", "rounds");
}

std::size_t pace_count(const PacingConfig& cfg, std::size_t t, std::size_t n_k) {
  cfg.validate();
  require(n_k >= cfg.batch_size, "pace_count: fewer samples than one batch");
  const std::size_t all = batch_count(n_k, cfg.batch_size);

  const double td = static_cast<double>(t);
  double growth = 0.0;
  switch (cfg.pace) {
    case Pace::linear: growth = td; break;
    case Pace::sqrt: growth = td * td; break;
    case Pace::exp: growth = std::exp(td); break;
  }
  const double horizon = cfg.alpha * static_cast<double>(cfg.total_rounds);
  const double ratio = cfg.beta + (1.0 - cfg.beta) * growth / horizon;
  const double value = ratio * static_cast<double>(n_k) / static_cast<double>(cfg.batch_size);
  if (!std::isfinite(value) || value >= static_cast<double>(all)) return all;
  // the slack absorbs representation error, e.g. (0.6 + 0.4 * 0.75) * 10 = 9.000000000000002
  const double rounded = std::ceil(value - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(rounded, 1.0)), 1, all);
}

std::vector<std::size_t> sort_batches(std::span<const BatchScore> scores) {
  std::vector<BatchScore> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), [](const BatchScore& a, const BatchScore& b) {
    if (a.score != b.score) return a.score < b.score;
    return a.batch_id < b.batch_id;
  });
  std::vector<std::size_t> order;
  order.reserve(sorted.size());
  for (const auto& s : sorted) order.push_back(s.batch_id);
  return order;
}

std::vector<std::size_t> select_batches(std::span<const std::size_t> order, std::size_t count) {
  require(count <= order.size(), "select_batches: count " + std::to_string(count) +
                                     " exceeds " + std::to_string(order.size()) + " batches");
  return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count)};
}

}  // namespace fibec
