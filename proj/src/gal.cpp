#include "fibec/gal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fibec/errors.hpp"

namespace fibec {

double NoiseConfig::q_norm() const {
  if (p_norm == 1.0) return std::numeric_limits<double>::infinity();
  return p_norm / (p_norm - 1.0);
}

void NoiseConfig::validate() const {
  if (!(noise_budget > 0.0) || !std::isfinite(noise_budget))
    throw ConfigError("noise_budget must be a positive finite number", "noise_budget");
  if (!(p_norm >= 1.0) || !std::isfinite(p_norm))
    throw ConfigError("p_norm must be a finite number >= 1", "p_norm");
}

Noise dual_norm_noise(std::span<const double> grad, const NoiseConfig& cfg) {
  cfg.validate();
  require(all_finite(grad), "dual_norm_noise: non-finite gradient");
  Noise out{Vector(grad.size(), 0.0), false};
  if (norm_inf(grad) == 0.0) {
    out.degenerate = true;
    return out;
  }
  if (cfg.p_norm == 1.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < grad.size(); ++i)
      if (std::abs(grad[i]) > std::abs(grad[best])) best = i;
    out.eps[best] = grad[best] > 0 ? cfg.noise_budget : -cfg.noise_budget;
    return out;
  }
  const double p = cfg.p_norm;
  const double q = cfg.q_norm();
  // Normalise by the largest magnitude first so |g|^q cannot overflow or underflow;
  // the closed form is invariant to positive rescaling of g.
  const double scale = norm_inf(grad);
  double sum_q = 0.0;
  for (double g : grad) sum_q += std::pow(std::abs(g) / scale, q);
  const double denom = std::pow(sum_q, 1.0 / p);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (grad[i] == 0.0) continue;
    const double mag = std::pow(std::abs(grad[i]) / scale, q - 1.0);
    out.eps[i] = cfg.noise_budget * (grad[i] > 0 ? mag : -mag) / denom;
  }
  return out;
}

Noise adversarial_noise(const LoraNetwork& net, std::span<const double> x, std::size_t label,
                        const NoiseConfig& cfg) {
  const Backprop bp = backprop(net, x, label);
  return dual_norm_noise(bp.d_input, cfg);
}

LayerDiff layer_relative_diff(const LoraNetwork& net, std::span<const double> x,
                              std::span<const double> eps) {
  require(eps.size() == x.size(), "layer_relative_diff: noise and sample lengths differ");
  Vector perturbed(x.begin(), x.end());
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] += eps[i];
  const ForwardTrace clean = forward(net, x);
  const ForwardTrace noisy = forward(net, perturbed);
  LayerDiff out{Vector(net.num_layers(), 0.0), std::vector<bool>(net.num_layers(), false)};
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double base = norm2(clean.hidden[l]);
    if (base == 0.0) {
      out.degenerate[l] = true;
      continue;
    }
    out.diff[l] = (norm2(noisy.hidden[l]) - base) / base;
  }
  return out;
}

Vector device_layer_scores(const LoraNetwork& net, std::span<const Sample> data, const NoiseConfig& cfg) {
  require(!data.empty(), "device_layer_scores: empty local dataset");
  Vector acc(net.num_layers(), 0.0);
  for (const auto& s : data) {
    const Noise noise = adversarial_noise(net, s.x, s.label, cfg);
    const LayerDiff d = layer_relative_diff(net, s.x, noise.eps);
    for (std::size_t l = 0; l < acc.size(); ++l) acc[l] += d.diff[l];
  }
  for (double& v : acc) v /= static_cast<double>(data.size());
  return acc;
}

Vector aggregate_layer_scores(std::span<const DeviceLayerScores> per_device) {
  require(!per_device.empty(), "aggregate_layer_scores: no devices");
  const std::size_t n_layers = per_device.front().scores.size();
  double total = 0.0;
  for (const auto& d : per_device) {
    require(d.n_k >= 0.0 && std::isfinite(d.n_k), "aggregate_layer_scores: invalid device weight");
    require(d.scores.size() == n_layers, "aggregate_layer_scores: layer count mismatch");
    total += d.n_k;
  }
  require(total > 0.0, "aggregate_layer_scores: total sample count is zero");
  Vector out(n_layers, 0.0);
  for (const auto& d : per_device)
    for (std::size_t l = 0; l < n_layers; ++l) out[l] += d.n_k * d.scores[l];
  for (double& v : out) v /= total;
  return out;
}

double lipschitz_estimate(const VectorFn& g, const Vector& center, double radius,
                          std::size_t samples, Rng& rng) {
  require(samples >= 2, "lipschitz_estimate: need at least two samples");
  require(radius > 0.0 && std::isfinite(radius), "lipschitz_estimate: radius must be > 0");
  const std::size_t dim = center.size();
  require(dim > 0, "lipschitz_estimate: empty domain");

  std::vector<Vector> points;
  std::vector<Vector> values;
  for (std::size_t s = 0; s < samples; ++s) {
    Vector dir(dim);
    for (double& v : dir) v = rng.normal();
    const double len = norm2(dir);
    const double r = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
    Vector p = center;
    if (len > 0.0)
      for (std::size_t i = 0; i < dim; ++i) p[i] += r * dir[i] / len;
    Vector gv = g(p);
    if (!all_finite(gv)) throw NumericalError("lipschitz_estimate: non-finite function value");
    points.push_back(std::move(p));
    values.push_back(std::move(gv));
  }

  double best = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t j = i + 1; j < samples; ++j) {
      double dx = 0.0;
      double dg = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dx += std::pow(points[i][k] - points[j][k], 2);
      if (dx == 0.0) continue;
      require(values[i].size() == values[j].size(), "lipschitz_estimate: ragged function values");
      for (std::size_t k = 0; k < values[i].size(); ++k) dg += std::pow(values[i][k] - values[j][k], 2);
      best = std::max(best, std::sqrt(dg) / std::sqrt(dx));
      any = true;
    }
  }
  if (!any) throw NumericalError("lipschitz_estimate: every sampled pair coincided");
  return best;
}

std::size_t eigengap_rank(std::span<const double> eigenvalues, double lipschitz) {
  require(!eigenvalues.empty(), "eigengap_rank: empty spectrum");
  for (std::size_t i = 1; i < eigenvalues.size(); ++i)
    require(eigenvalues[i - 1] <= eigenvalues[i], "eigengap_rank: eigenvalues not ascending");
  const double threshold = 4.0 * lipschitz;
  for (std::size_t r = 1; r < eigenvalues.size(); ++r)
    if (eigenvalues[r] - eigenvalues[r - 1] > threshold) return r;
  return eigenvalues.size();
}

Spectrum hessian_spectrum(const Matrix& hessian) {
  const EigenDecomposition eig = eigh_symmetric(hessian);
  const double cutoff = 1e-8 * norm_inf(eig.values);
  Spectrum out;
  for (double v : eig.values)
    if (std::abs(v) > cutoff) out.eigenvalues.push_back(v);
  if (out.eigenvalues.empty()) out.eigenvalues = eig.values;
  out.rank = out.eigenvalues.size();
  return out;
}

std::size_t gal_count(std::span<const DeviceRank> per_device, std::size_t num_layers, double mu) {
  require(!per_device.empty(), "gal_count: no devices");
  require(num_layers >= 1, "gal_count: no layers");
  require(mu > 0.0 && std::isfinite(mu), "gal_count: mu must be > 0");
  double total = 0.0;
  double weighted = 0.0;
  for (const auto& d : per_device) {
    require(d.rank >= 1, "gal_count: Hessian rank must be >= 1");
    require(d.r <= d.rank, "gal_count: eigengap index exceeds rank");
    require(d.n_k >= 0.0, "gal_count: negative device weight");
    const double n_star_k =
        (1.0 - static_cast<double>(d.r) / static_cast<double>(d.rank)) * static_cast<double>(num_layers);
    weighted += d.n_k * n_star_k;
    total += d.n_k;
  }
  require(total > 0.0, "gal_count: total sample count is zero");
  const double n_star = mu / total * weighted;
  const auto rounded = static_cast<long long>(std::llround(n_star));
  return static_cast<std::size_t>(std::clamp<long long>(rounded, 1, static_cast<long long>(num_layers)));
}

std::vector<std::size_t> select_gal(std::span<const double> global_scores, std::size_t n_star) {
  require(n_star <= global_scores.size(), "select_gal: n_star exceeds layer count");
  std::vector<std::size_t> order(global_scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return global_scores[a] > global_scores[b];
  });
  order.resize(n_star);
  std::sort(order.begin(), order.end());
  return order;
}

double local_loss(const LoraNetwork& net, std::span<const Sample> data) {
  require(!data.empty(), "local_loss: empty dataset");
  double sum = 0.0;
  for (const auto& s : data) sum += *forward(net, s.x, s.label).loss;
  return sum / static_cast<double>(data.size());
}

Vector local_loss_gradient(const LoraNetwork& net, std::span<const Sample> data) {
  require(!data.empty(), "local_loss_gradient: empty dataset");
  Gradients acc = Gradients::zeros_like(net);
  for (const auto& s : data) acc.accumulate(backward(net, s.x, s.label));
  Vector flat = flatten_gradients(acc);
  for (double& v : flat) v /= static_cast<double>(data.size());
  return flat;
}

Vector local_loss_gradient_at(const LoraNetwork& net, std::span<const Sample> data,
                              std::span<const double> flat) {
  LoraNetwork probe = net;
  assign_lora(probe, flat);
  return local_loss_gradient(probe, data);
}

LosslessAnalysis analyze_lossless(const LoraNetwork& net, std::span<const Sample> data,
                                  std::span<const double> initial_lora, Rng& rng,
                                  std::size_t lipschitz_samples) {
  require(initial_lora.size() == net.lora_size(), "analyze_lossless: initial LoRA length mismatch");
  const Vector p_t = flatten_lora(net);
  auto grad = [&](const Vector& flat) { return local_loss_gradient_at(net, data, flat); };

  LosslessAnalysis out;
  out.hessian = finite_diff_hessian(grad, p_t);
  out.spectrum = hessian_spectrum(out.hessian);
  out.rank = out.spectrum.rank;

  Vector delta(p_t.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = initial_lora[i] - p_t[i];
  double radius = norm2(delta);
  // no warmup movement: probe a small neighbourhood instead of a zero-radius ball
  if (!(radius > 0.0)) radius = 1e-3 * std::max(1.0, norm_inf(p_t));

  const Matrix& h = out.hessian;
  auto base_fn = [&](const Vector& d) {
    Vector hv = matvec(h, d);
    Vector shifted(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) shifted[i] = d[i] + p_t[i];
    const Vector gv = grad(shifted);
    for (std::size_t i = 0; i < hv.size(); ++i) hv[i] -= gv[i];
    return hv;
  };
  out.lipschitz = lipschitz_estimate(base_fn, delta, radius, lipschitz_samples, rng);
  out.r = eigengap_rank(out.spectrum.eigenvalues, out.lipschitz);
  return out;
}

bool GalDecision::contains(std::size_t layer) const {
  return std::binary_search(layers.begin(), layers.end(), layer);
}

}  // namespace fibec
