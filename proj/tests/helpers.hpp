#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fibec/data.hpp"
#include "fibec/lora.hpp"
#include "fibec/numeric.hpp"

namespace testing {

using namespace fibec;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sigma = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal(0.0, sigma);
  return m;
}

inline Vector random_vector(std::size_t n, Rng& rng, double sigma = 1.0) {
  Vector v(n);
  for (double& x : v) x = rng.normal(0.0, sigma);
  return v;
}

// Every parameter random, B included, so all gradient paths are live.
inline LoraNetwork random_net(const std::vector<std::size_t>& widths, std::size_t rank, Rng& rng) {
  std::vector<LoraLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t din = widths[l];
    const std::size_t dout = widths[l + 1];
    const std::size_t r = std::min({rank, din, dout});
    const double scale = 1.0 / std::sqrt(static_cast<double>(din));
    layers.emplace_back(random_matrix(dout, din, rng, scale), random_vector(dout, rng, 0.1),
                        random_matrix(r, din, rng, 0.5), random_matrix(dout, r, rng, 0.5),
                        l + 2 == widths.size() ? Activation::identity : Activation::relu);
  }
  return LoraNetwork(std::move(layers));
}

// Random widths in [2, 6] for 1-3 layers: at most a couple of hundred LoRA parameters.
inline LoraNetwork random_small_net(Rng& rng) {
  const std::size_t depth = 1 + rng.index(3);
  std::vector<std::size_t> widths{2 + rng.index(5)};
  for (std::size_t l = 0; l < depth; ++l) widths.push_back(2 + rng.index(5));
  return random_net(widths, 1 + rng.index(2), rng);
}

// Loss as a function of the flattened LoRA vector.
inline double loss_at(const LoraNetwork& net, const Vector& flat, const Vector& x, std::size_t label) {
  LoraNetwork copy = net;
  assign_lora(copy, flat);
  return *forward(copy, x, label).loss;
}

// Loss as a function of the frozen weights of one layer, row-major: the gradient with respect to
// the effective weight W + BA equals the gradient with respect to W.
inline double loss_with_w(const LoraNetwork& net, std::size_t layer, const Vector& w, const Vector& x,
                          std::size_t label) {
  std::vector<LoraLayer> layers = net.layers();
  const LoraLayer& old = layers[layer];
  layers[layer] = LoraLayer(Matrix(old.d_out(), old.d_in(), w), old.bias(), old.a(), old.b(), old.activation());
  return *forward(LoraNetwork(std::move(layers)), x, label).loss;
}

inline bool close(double analytic, double oracle, double abs_tol = 1e-4, double rel_tol = 1e-3) {
  return std::abs(analytic - oracle) <= std::max(abs_tol, rel_tol * std::abs(oracle));
}

inline Dataset random_dataset(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng) {
  Dataset ds;
  ds.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back({random_vector(dim, rng), rng.index(classes)});
  return ds;
}

}  // namespace testing
