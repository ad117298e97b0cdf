#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fibec/numeric.hpp"

namespace fibec {

enum class Activation { relu, identity };

/// One dense layer: h = act((W + B A) x + bias). W and bias are frozen after construction.
class LoraLayer {
 public:
  LoraLayer(Matrix w_base, Vector bias, Matrix a, Matrix b, Activation activation);

  std::size_t d_in() const noexcept { return w_base_.cols(); }
  std::size_t d_out() const noexcept { return w_base_.rows(); }
  std::size_t rank() const noexcept { return a_.rows(); }
  std::size_t lora_size() const noexcept { return a_.size() + b_.size(); }

  const Matrix& w_base() const noexcept { return w_base_; }
  const Vector& bias() const noexcept { return bias_; }
  Activation activation() const noexcept { return activation_; }

  const Matrix& a() const noexcept { return a_; }
  const Matrix& b() const noexcept { return b_; }
  Matrix& a() noexcept { return a_; }
  Matrix& b() noexcept { return b_; }

 private:
  Matrix w_base_;
  Vector bias_;
  Matrix a_;  // rank x d_in
  Matrix b_;  // d_out x rank
  Activation activation_;
};

struct NetworkShape {
  std::vector<std::size_t> widths;  // input, hidden..., classes
  std::size_t rank = 2;
};

class LoraNetwork {
 public:
  explicit LoraNetwork(std::vector<LoraLayer> layers);

  // He-initialised frozen bases, A ~ N(0, a_sigma^2), B = 0; relu on hidden layers.
  static LoraNetwork create(const NetworkShape& shape, Rng& rng, double a_sigma = 0.02);

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t input_dim() const { return layers_.front().d_in(); }
  std::size_t num_classes() const { return layers_.back().d_out(); }
  std::size_t lora_size() const;

  const LoraLayer& layer(std::size_t l) const { return layers_.at(l); }
  LoraLayer& layer(std::size_t l) { return layers_.at(l); }
  const std::vector<LoraLayer>& layers() const noexcept { return layers_; }

 private:
  std::vector<LoraLayer> layers_;
};

struct ForwardTrace {
  std::vector<Vector> hidden;  // post-activation output per layer; hidden.back() == logits
  Vector logits;
  std::optional<double> loss;  // cross-entropy, present when a label was given
};

struct LayerGrad {
  Matrix da;
  Matrix db;
};

struct Gradients {
  std::vector<LayerGrad> layers;
  Vector d_input;
  double loss = 0.0;

  static Gradients zeros_like(const LoraNetwork& net);
  void accumulate(const Gradients& other);
};

/// Per-layer trainable-neuron mask. nullopt = every output neuron of that layer trains.
using LayerMask = std::optional<std::vector<bool>>;
using NeuronMask = std::vector<LayerMask>;

NeuronMask full_mask(const LoraNetwork& net);

ForwardTrace forward(const LoraNetwork& net, std::span<const double> x,
                     std::optional<std::size_t> label = std::nullopt);

double cross_entropy(std::span<const double> logits, std::size_t label);
Vector softmax(std::span<const double> logits);
std::size_t argmax(std::span<const double> v);

/// Layer inputs and loss sensitivities dL/dz from one backward pass.
struct Backprop {
  std::vector<Vector> inputs;  // x_l fed to layer l
  std::vector<Vector> deltas;  // dL/dz_l, z_l the pre-activation
  Vector d_input;
  double loss = 0.0;
};

Backprop backprop(const LoraNetwork& net, std::span<const double> x, std::size_t label);

// Analytic cross-entropy gradients. With a mask, dA of a layer only collects the paths
// through that layer's trainable neurons; backpropagation to earlier layers is unaffected.
Gradients backward(const LoraNetwork& net, std::span<const double> x, std::size_t label,
                   const NeuronMask* mask = nullptr);

/// SGD step on A and B. Rows of B whose neuron is masked out are left untouched, and A of a
/// layer whose mask is all-false is left untouched.
void apply_update(LoraNetwork& net, const Gradients& g, double lr, const NeuronMask* mask = nullptr);

/// B_t A_t - B_prev A_prev
Matrix full_rank_delta(const Matrix& a_t, const Matrix& b_t, const Matrix& a_prev,
                       const Matrix& b_prev);

// Flattened LoRA vector: for each layer, A row-major then B row-major.
Vector flatten_lora(const LoraNetwork& net);
void assign_lora(LoraNetwork& net, std::span<const double> flat);
Vector flatten_gradients(const Gradients& g);
std::vector<std::size_t> lora_offsets(const LoraNetwork& net);  // size num_layers + 1

std::string frozen_digest(const LoraNetwork& net);  // SHA-256 hex of every w_base and bias
std::string sha256_hex(std::span<const unsigned char> bytes);

// Versioned little-endian binary checkpoint: "FBLN", u32 version, u32 layer count, then per
// layer u32 d_in, d_out, rank, u8 activation, followed by w_base, bias, a, b as f64.
void save_checkpoint(const LoraNetwork& net, std::ostream& out);
LoraNetwork load_checkpoint(std::istream& in);

}  // namespace fibec
