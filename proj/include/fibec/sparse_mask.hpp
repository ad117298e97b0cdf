#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fibec/gal.hpp"
#include "fibec/lora.hpp"

namespace fibec {

struct LayerRatio {
  double rho = 1.0;
  std::size_t r = 0;
  std::size_t rank = 0;
};

// rho = 1 - r / R, with r raised to at least 1.
double ratio_from_rank(std::size_t r, std::size_t rank);

// Square block [offsets[layer], offsets[layer + 1]) of a whole-model LoRA Hessian.
Matrix hessian_block(const Matrix& hessian, const std::vector<std::size_t>& offsets, std::size_t layer);

/// Eigengap rule on one layer's block of the Hessian.
LayerRatio layer_ratio_from_block(const Matrix& block, double lipschitz);

/// Computes the layer's Hessian block of the local loss directly, then applies the eigengap rule.
LayerRatio layer_ratio(const LoraNetwork& net, std::span<const Sample> data, std::size_t layer,
                       double lipschitz);

/// Top round(rho * n) neurons by score (at least one), ties to the lower index.
std::vector<bool> build_mask(std::span<const double> scores, double rho);

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

/// GAL layers train every LoRA entry. A masked non-GAL layer trains the B rows of its selected
/// neurons and the shared A (as long as one neuron is selected).
ParamCount masked_param_count(const LoraNetwork& net, const GalDecision& gal, const NeuronMask& mask);

}  // namespace fibec
