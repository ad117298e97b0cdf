#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fibec/data.hpp"
#include "fibec/lora.hpp"

namespace fibec {

/// Diagonal Fisher information laid out like the full weight matrices: layers[l] holds
/// d_out(l) * d_in(l) entries, row-major, row width row_width[l].
struct FimDiag {
  std::vector<Vector> layers;
  std::vector<std::size_t> row_width;

  static FimDiag zeros_like(const LoraNetwork& net);
  double trace() const;
  std::size_t size() const;
  bool same_shape(const FimDiag& other) const;
};

struct BatchScore {
  std::size_t batch_id = 0;
  double score = 0.0;
};

// Squared gradient of log p(label | x) with respect to the effective weight W + B A of each layer.
FimDiag sample_fim_diag(const LoraNetwork& net, std::span<const double> x, std::size_t label);

// Mean of sample_fim_diag over the samples.
FimDiag empirical_fim_diag(const LoraNetwork& net, std::span<const Sample> samples);

double sample_score(const FimDiag& fd);
double batch_score(std::span<const double> sample_scores);

FimDiag momentum_update(const std::optional<FimDiag>& prev, const FimDiag& fresh, double gamma_m);

/// Row sums of one layer's block: the importance of each output neuron.
Vector neuron_scores(const FimDiag& fd, std::size_t layer);

}  // namespace fibec
