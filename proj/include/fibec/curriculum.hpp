#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "fibec/fisher.hpp"

namespace fibec {

enum class Pace { linear, sqrt, exp };

Pace parse_pace(std::string_view name);
std::string_view to_string(Pace pace);

struct PacingConfig {
  double beta = 0.6;   // initial sample ratio
  double alpha = 0.8;  // fraction of the rounds until every batch is in play
  Pace pace = Pace::linear;
  std::size_t batch_size = 8;
  std::size_t total_rounds = 60;

  void validate() const;
};

inline std::size_t batch_count(std::size_t n_samples, std::size_t batch_size) {
  return (n_samples + batch_size - 1) / batch_size;
}

/// Batches in play at round t for a device with n_k samples. Ceiling of the pacing formula,
/// clamped to [1, ceil(n_k / batch_size)].
///   linear: (beta + (1 - beta) t   / (alpha T)) n_k / B
///   sqrt:   (beta + (1 - beta) t^2 / (alpha T)) n_k / B
///   exp:    (beta + (1 - beta) e^t / (alpha T)) n_k / B
std::size_t pace_count(const PacingConfig& cfg, std::size_t t, std::size_t n_k);

// Ascending by score, ties by ascending batch id.
std::vector<std::size_t> sort_batches(std::span<const BatchScore> scores);

// First `count` entries of the sorted order.
std::vector<std::size_t> select_batches(std::span<const std::size_t> order, std::size_t count);

}  // namespace fibec
