#include "fibec/fisher.hpp"

#include <cmath>
#include <string>

#include "fibec/errors.hpp"

namespace fibec {

FimDiag FimDiag::zeros_like(const LoraNetwork& net) {
  FimDiag fd;
  for (const auto& layer : net.layers()) {
    fd.layers.emplace_back(layer.d_out() * layer.d_in(), 0.0);
    fd.row_width.push_back(layer.d_in());
  }
  return fd;
}

double FimDiag::trace() const {
  double t = 0.0;
  for (const auto& layer : layers)
    for (double v : layer) t += v;
  return t;
}

std::size_t FimDiag::size() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.size();
  return n;
}

bool FimDiag::same_shape(const FimDiag& other) const {
  if (row_width != other.row_width || layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (layers[l].size() != other.layers[l].size()) return false;
  return true;
}

FimDiag sample_fim_diag(const LoraNetwork& net, std::span<const double> x, std::size_t label) {
  const Backprop bp = backprop(net, x, label);
  FimDiag fd = FimDiag::zeros_like(net);
  // d log p / dW_l = -delta_l x_l^T; the sign vanishes when squared.
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Vector& delta = bp.deltas[l];
    const Vector& xin = bp.inputs[l];
    const std::size_t width = xin.size();
    auto& out = fd.layers[l];
    for (std::size_t i = 0; i < delta.size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double g = delta[i] * xin[j];
        out[i * width + j] = g * g;
      }
    }
    if (!all_finite(out))
      throw NumericalError("sample_fim_diag: non-finite gradient in layer " + std::to_string(l));
  }
  return fd;
}

FimDiag empirical_fim_diag(const LoraNetwork& net, std::span<const Sample> samples) {
  require(!samples.empty(), "empirical_fim_diag: no samples");
  FimDiag acc = FimDiag::zeros_like(net);
  for (const auto& s : samples) {
    const FimDiag fd = sample_fim_diag(net, s.x, s.label);
    for (std::size_t l = 0; l < acc.layers.size(); ++l)
      for (std::size_t i = 0; i < acc.layers[l].size(); ++i) acc.layers[l][i] += fd.layers[l][i];
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (auto& layer : acc.layers)
    for (double& v : layer) v *= inv;
  return acc;
}

double sample_score(const FimDiag& fd) { return fd.trace(); }

double batch_score(std::span<const double> sample_scores) {
  require(!sample_scores.empty(), "batch_score: empty batch");
  double s = 0.0;
  for (double v : sample_scores) s += v;
  return s;
}

FimDiag momentum_update(const std::optional<FimDiag>& prev, const FimDiag& fresh, double gamma_m) {
  require(gamma_m >= 0.0 && gamma_m <= 1.0, "momentum_update: coefficient outside [0, 1]");
  if (!prev) return fresh;
  require(prev->same_shape(fresh), "momentum_update: shape mismatch");
  FimDiag out = fresh;
  for (std::size_t l = 0; l < out.layers.size(); ++l)
    for (std::size_t i = 0; i < out.layers[l].size(); ++i)
      out.layers[l][i] = gamma_m * prev->layers[l][i] + (1.0 - gamma_m) * fresh.layers[l][i];
  return out;
}

Vector neuron_scores(const FimDiag& fd, std::size_t layer) {
  require(layer < fd.layers.size(), "neuron_scores: layer " + std::to_string(layer) + " out of range");
  const auto& block = fd.layers[layer];
  const std::size_t width = fd.row_width[layer];
  require(width > 0 && block.size() % width == 0, "neuron_scores: malformed layer block");
  Vector scores(block.size() / width, 0.0);
  for (std::size_t mu = 0; mu < scores.size(); ++mu)
    for (std::size_t v = 0; v < width; ++v) scores[mu] += block[mu * width + v];
  return scores;
}

}  // namespace fibec
