#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fibec/data.hpp"
#include "fibec/lora.hpp"

namespace fibec {

struct NoiseConfig {
  double noise_budget = 0.5;  // gamma: l_p radius of the perturbation
  double p_norm = 2.0;

  // Conjugate exponent; infinity when p == 1.
  double q_norm() const;
  void validate() const;
};

struct Noise {
  Vector eps;
  bool degenerate = false;  // gradient was zero; eps is all zero
};

/// Maximiser of the first-order loss increase eps . g over ||eps||_p <= gamma:
///   eps = gamma * sign(g) |g|^(q-1) / (||g||_q^q)^(1/p)
/// For p == 1 all the budget goes to the largest |g_i| (lowest index on ties).
Noise dual_norm_noise(std::span<const double> grad, const NoiseConfig& cfg);

// Noise on the input sample, from the loss gradient with respect to that input.
Noise adversarial_noise(const LoraNetwork& net, std::span<const double> x, std::size_t label,
                        const NoiseConfig& cfg);

struct LayerDiff {
  Vector diff;                   // (||h_l(x + eps)|| - ||h_l(x)||) / ||h_l(x)||
  std::vector<bool> degenerate;  // ||h_l(x)|| == 0; diff recorded as 0
};

LayerDiff layer_relative_diff(const LoraNetwork& net, std::span<const double> x,
                              std::span<const double> eps);

// Mean per-layer relative diff over the device's samples (noise recomputed per sample).
Vector device_layer_scores(const LoraNetwork& net, std::span<const Sample> data, const NoiseConfig& cfg);

struct DeviceLayerScores {
  double n_k = 0.0;
  Vector scores;
};

/// Sample-count-weighted average of per-device layer scores.
Vector aggregate_layer_scores(std::span<const DeviceLayerScores> per_device);

/// Largest ||g(x) - g(y)|| / ||x - y|| over pairs of `samples` points drawn uniformly from the
/// ball of `radius` around `center`. Coincident pairs are skipped.
double lipschitz_estimate(const VectorFn& g, const Vector& center, double radius,
                          std::size_t samples, Rng& rng);

/// Smallest 1-based r with eigenvalues[r] - eigenvalues[r-1] > 4 * lipschitz, else R.
std::size_t eigengap_rank(std::span<const double> eigenvalues, double lipschitz);

struct Spectrum {
  Vector eigenvalues;  // the numerically non-zero ones, ascending
  std::size_t rank = 0;
};

// Eigenvalues with |lambda| > 1e-8 * max|lambda|. An all-zero matrix keeps its full spectrum.
Spectrum hessian_spectrum(const Matrix& hessian);

struct DeviceRank {
  double n_k = 0.0;
  std::size_t r = 0;
  std::size_t rank = 1;
};

/// round((mu / N) * sum_k n_k (1 - r_k / R_k) L), clamped to [1, L].
std::size_t gal_count(std::span<const DeviceRank> per_device, std::size_t num_layers, double mu);

/// Indices (ascending) of the n_star highest scores; ties prefer the lower layer index.
std::vector<std::size_t> select_gal(std::span<const double> global_scores, std::size_t n_star);

/// Mean cross-entropy of `data` and its gradient over the flattened LoRA vector.
double local_loss(const LoraNetwork& net, std::span<const Sample> data);
Vector local_loss_gradient(const LoraNetwork& net, std::span<const Sample> data);
// Same, evaluated with the LoRA vector replaced by `flat`.
Vector local_loss_gradient_at(const LoraNetwork& net, std::span<const Sample> data,
                              std::span<const double> flat);

struct LosslessAnalysis {
  Matrix hessian;      // over the flattened LoRA vector at the post-warmup point
  Spectrum spectrum;
  double lipschitz = 0.0;
  std::size_t r = 0;
  std::size_t rank = 0;
};

/// Hessian of the local loss at `net`'s LoRA point P_T, eigengap rank, and the Lipschitz
/// constant of  Delta' -> H Delta' - grad L(Delta' + P_T)  around Delta = initial - P_T.
LosslessAnalysis analyze_lossless(const LoraNetwork& net, std::span<const Sample> data,
                                  std::span<const double> initial_lora, Rng& rng,
                                  std::size_t lipschitz_samples = 64);

struct DeviceGalInfo {
  std::size_t device = 0;
  double n_k = 0.0;
  std::size_t r = 0;
  std::size_t rank = 0;
  double lipschitz = 0.0;
  Vector layer_scores;
};

struct GalDecision {
  std::vector<std::size_t> layers;  // ascending
  std::size_t n_star = 0;
  double mu = 1.0;
  Vector global_scores;
  std::vector<DeviceGalInfo> devices;

  bool contains(std::size_t layer) const;
};

}  // namespace fibec
