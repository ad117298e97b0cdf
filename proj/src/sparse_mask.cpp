#include "fibec/sparse_mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fibec/errors.hpp"

namespace fibec {

double ratio_from_rank(std::size_t r, std::size_t rank) {
  require(rank >= 1, "ratio_from_rank: rank must be >= 1");
  require(r <= rank, "ratio_from_rank: r exceeds rank");
  const std::size_t eff = std::max<std::size_t>(r, 1);
  return 1.0 - static_cast<double>(eff) / static_cast<double>(rank);
}

Matrix hessian_block(const Matrix& hessian, const std::vector<std::size_t>& offsets, std::size_t layer) {
  require(layer + 1 < offsets.size(), "hessian_block: layer out of range");
  const std::size_t lo = offsets[layer];
  const std::size_t hi = offsets[layer + 1];
  require(hi <= hessian.rows() && hessian.rows() == hessian.cols(), "hessian_block: offsets exceed Hessian");
  Matrix block(hi - lo, hi - lo);
  for (std::size_t i = lo; i < hi; ++i)
    for (std::size_t j = lo; j < hi; ++j) block(i - lo, j - lo) = hessian(i, j);
  return block;
}

LayerRatio layer_ratio_from_block(const Matrix& block, double lipschitz) {
  const Spectrum spec = hessian_spectrum(block);
  LayerRatio out;
  out.rank = spec.rank;
  out.r = eigengap_rank(spec.eigenvalues, lipschitz);
  out.rho = ratio_from_rank(out.r, out.rank);
  return out;
}

LayerRatio layer_ratio(const LoraNetwork& net, std::span<const Sample> data, std::size_t layer,
                       double lipschitz) {
  require(layer < net.num_layers(), "layer_ratio: layer out of range");
  const auto offsets = lora_offsets(net);
  const std::size_t lo = offsets[layer];
  const std::size_t hi = offsets[layer + 1];
  const Vector full = flatten_lora(net);
  Vector local(full.begin() + static_cast<std::ptrdiff_t>(lo), full.begin() + static_cast<std::ptrdiff_t>(hi));
  auto grad = [&](const Vector& part) {
    Vector flat = full;
    std::copy(part.begin(), part.end(), flat.begin() + static_cast<std::ptrdiff_t>(lo));
    const Vector g = local_loss_gradient_at(net, data, flat);
    return Vector(g.begin() + static_cast<std::ptrdiff_t>(lo), g.begin() + static_cast<std::ptrdiff_t>(hi));
  };
  // step chosen from the whole LoRA vector so the block matches the whole-model Hessian's
  return layer_ratio_from_block(finite_diff_hessian(grad, local, default_fd_step(full)), lipschitz);
}

std::vector<bool> build_mask(std::span<const double> scores, double rho) {
  require(!scores.empty(), "build_mask: empty score vector");
  require(rho >= 0.0 && rho <= 1.0, "build_mask: rho outside [0, 1]");
  const std::size_t n = scores.size();
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(rho * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = true;
  return mask;
}

ParamCount masked_param_count(const LoraNetwork& net, const GalDecision& gal, const NeuronMask& mask) {
  require(mask.size() == net.num_layers(), "masked_param_count: mask layer count mismatch");
  ParamCount count;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    const std::size_t total = layer.lora_size();
    if (gal.contains(l) || !mask[l]) {
      count.trainable += total;
      continue;
    }
    require(mask[l]->size() == layer.d_out(), "masked_param_count: neuron count mismatch");
    const auto selected = static_cast<std::size_t>(std::count(mask[l]->begin(), mask[l]->end(), true));
    const std::size_t trainable = selected * layer.rank() + (selected > 0 ? layer.a().size() : 0);
    count.trainable += trainable;
    count.frozen += total - trainable;
  }
  return count;
}

}  // namespace fibec
