#include "fibec/lora.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <memory>
#include <ostream>

#include "fibec/binary_io.hpp"
#include "fibec/errors.hpp"

namespace fibec {

LoraLayer::LoraLayer(Matrix w_base, Vector bias, Matrix a, Matrix b, Activation activation)
    : w_base_(std::move(w_base)),
      bias_(std::move(bias)),
      a_(std::move(a)),
      b_(std::move(b)),
      activation_(activation) {
  require(bias_.size() == d_out(), "LoraLayer: bias length != d_out");
  require(a_.cols() == d_in(), "LoraLayer: A must be rank x d_in");
  require(b_.rows() == d_out() && b_.cols() == a_.rows(), "LoraLayer: B must be d_out x rank");
  require(rank() <= std::min(d_in(), d_out()), "LoraLayer: rank exceeds min(d_in, d_out)");
}

LoraNetwork::LoraNetwork(std::vector<LoraLayer> layers) : layers_(std::move(layers)) {
  require(!layers_.empty(), "LoraNetwork: no layers");
  for (std::size_t l = 1; l < layers_.size(); ++l)
    require(layers_[l].d_in() == layers_[l - 1].d_out(),
            "LoraNetwork: layer " + std::to_string(l) + " input does not match previous output");
  require(layers_.back().activation() == Activation::identity,
          "LoraNetwork: final layer must be identity-activated");
}

LoraNetwork LoraNetwork::create(const NetworkShape& shape, Rng& rng, double a_sigma) {
  require(shape.widths.size() >= 2, "LoraNetwork::create: need at least input and output widths");
  std::vector<LoraLayer> layers;
  const std::size_t n_layers = shape.widths.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t d_in = shape.widths[l];
    const std::size_t d_out = shape.widths[l + 1];
    const double he = std::sqrt(2.0 / static_cast<double>(d_in));
    Matrix w(d_out, d_in);
    for (double& v : w.data()) v = rng.normal(0.0, he);
    Vector bias(d_out, 0.0);
    Matrix a(shape.rank, d_in);
    for (double& v : a.data()) v = rng.normal(0.0, a_sigma);
    Matrix b(d_out, shape.rank, 0.0);
    layers.emplace_back(std::move(w), std::move(bias), std::move(a), std::move(b),
                        l + 1 == n_layers ? Activation::identity : Activation::relu);
  }
  return LoraNetwork(std::move(layers));
}

std::size_t LoraNetwork::lora_size() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.lora_size();
  return n;
}

Gradients Gradients::zeros_like(const LoraNetwork& net) {
  Gradients g;
  for (const auto& layer : net.layers())
    g.layers.push_back({Matrix(layer.a().rows(), layer.a().cols()),
                        Matrix(layer.b().rows(), layer.b().cols())});
  g.d_input.assign(net.input_dim(), 0.0);
  return g;
}

void Gradients::accumulate(const Gradients& other) {
  require(layers.size() == other.layers.size(), "Gradients::accumulate: layer count mismatch");
  auto add_into = [](Matrix& dst, const Matrix& src) {
    require(dst.rows() == src.rows() && dst.cols() == src.cols(), "Gradients::accumulate: shape mismatch");
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    add_into(layers[l].da, other.layers[l].da);
    add_into(layers[l].db, other.layers[l].db);
  }
  require(d_input.size() == other.d_input.size(), "Gradients::accumulate: input size mismatch");
  for (std::size_t i = 0; i < d_input.size(); ++i) d_input[i] += other.d_input[i];
  loss += other.loss;
}

NeuronMask full_mask(const LoraNetwork& net) { return NeuronMask(net.num_layers(), std::nullopt); }

// ---------------------------------------------------------------------------

namespace {

// z = W x + B (A x) + bias
Vector pre_activation(const LoraLayer& layer, std::span<const double> x) {
  Vector z = matvec(layer.w_base(), x);
  const Vector ax = matvec(layer.a(), x);
  const Vector bax = matvec(layer.b(), ax);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += bax[i] + layer.bias()[i];
  return z;
}

Vector activate(Activation act, Vector z) {
  if (act == Activation::relu)
    for (double& v : z) v = v > 0.0 ? v : 0.0;
  return z;
}

void check_input(const LoraNetwork& net, std::span<const double> x) {
  require(x.size() == net.input_dim(), "forward: input dimension " + std::to_string(x.size()) +
                                           " != " + std::to_string(net.input_dim()));
}

void check_mask(const LoraNetwork& net, const NeuronMask& mask) {
  require(mask.size() == net.num_layers(), "mask: layer count mismatch");
  for (std::size_t l = 0; l < mask.size(); ++l)
    if (mask[l])
      require(mask[l]->size() == net.layer(l).d_out(),
              "mask: layer " + std::to_string(l) + " neuron count mismatch");
}

}  // namespace

double cross_entropy(std::span<const double> logits, std::size_t label) {
  require(label < logits.size(), "cross_entropy: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum) - logits[label];
}

Vector softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : p) sum += (v = std::exp(v - mx));
  for (double& v : p) v /= sum;
  return p;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

ForwardTrace forward(const LoraNetwork& net, std::span<const double> x,
                     std::optional<std::size_t> label) {
  check_input(net, x);
  ForwardTrace trace;
  Vector cur(x.begin(), x.end());
  for (const auto& layer : net.layers()) {
    cur = activate(layer.activation(), pre_activation(layer, cur));
    trace.hidden.push_back(cur);
  }
  trace.logits = cur;
  if (label) trace.loss = cross_entropy(trace.logits, *label);
  return trace;
}

Backprop backprop(const LoraNetwork& net, std::span<const double> x, std::size_t label) {
  check_input(net, x);
  require(label < net.num_classes(), "backprop: label out of range");
  const std::size_t n = net.num_layers();
  Backprop bp;
  bp.inputs.reserve(n);
  std::vector<Vector> pre(n);
  Vector cur(x.begin(), x.end());
  for (std::size_t l = 0; l < n; ++l) {
    bp.inputs.push_back(cur);
    pre[l] = pre_activation(net.layer(l), cur);
    cur = activate(net.layer(l).activation(), pre[l]);
  }
  bp.loss = cross_entropy(cur, label);

  bp.deltas.assign(n, {});
  Vector delta = softmax(cur);
  delta[label] -= 1.0;
  for (std::size_t l = n; l-- > 0;) {
    const auto& layer = net.layer(l);
    if (layer.activation() == Activation::relu)
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (pre[l][i] <= 0.0) delta[i] = 0.0;
    bp.deltas[l] = delta;
    // dx = W^T delta + A^T (B^T delta)
    Vector dx = matvec_transposed(layer.w_base(), delta);
    const Vector btd = matvec_transposed(layer.b(), delta);
    const Vector atbtd = matvec_transposed(layer.a(), btd);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += atbtd[i];
    delta = std::move(dx);
  }
  bp.d_input = std::move(delta);
  return bp;
}

Gradients backward(const LoraNetwork& net, std::span<const double> x, std::size_t label,
                   const NeuronMask* mask) {
  if (mask) check_mask(net, *mask);
  Backprop bp = backprop(net, x, label);
  Gradients g;
  g.loss = bp.loss;
  g.d_input = std::move(bp.d_input);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    const Vector& xin = bp.inputs[l];
    const Vector& delta = bp.deltas[l];
    const Vector ax = matvec(layer.a(), xin);

    LayerGrad lg{Matrix(layer.rank(), layer.d_in()), Matrix(layer.d_out(), layer.rank())};
    // dB = delta (A x)^T
    for (std::size_t i = 0; i < layer.d_out(); ++i)
      for (std::size_t k = 0; k < layer.rank(); ++k) lg.db(i, k) = delta[i] * ax[k];

    // dA = (B^T delta_masked) x^T
    Vector routed = delta;
    if (mask && (*mask)[l])
      for (std::size_t i = 0; i < routed.size(); ++i)
        if (!(*(*mask)[l])[i]) routed[i] = 0.0;
    const Vector btd = matvec_transposed(layer.b(), routed);
    for (std::size_t k = 0; k < layer.rank(); ++k)
      for (std::size_t j = 0; j < layer.d_in(); ++j) lg.da(k, j) = btd[k] * xin[j];
    g.layers.push_back(std::move(lg));
  }
  return g;
}

void apply_update(LoraNetwork& net, const Gradients& g, double lr, const NeuronMask* mask) {
  require(lr >= 0.0 && std::isfinite(lr), "apply_update: learning rate must be finite and >= 0");
  require(g.layers.size() == net.num_layers(), "apply_update: gradient layer count mismatch");
  if (mask) check_mask(net, *mask);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    const auto& lg = g.layers[l];
    require(lg.da.rows() == layer.a().rows() && lg.da.cols() == layer.a().cols(),
            "apply_update: dA shape mismatch");
    require(lg.db.rows() == layer.b().rows() && lg.db.cols() == layer.b().cols(),
            "apply_update: dB shape mismatch");
    const LayerMask* lm = mask ? &(*mask)[l] : nullptr;
    const bool restricted = lm && lm->has_value();
    const bool any_trainable =
        !restricted || std::any_of((*lm)->begin(), (*lm)->end(), [](bool v) { return v; });

    if (any_trainable) {
      auto a = layer.a().data();
      auto da = lg.da.data();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] -= lr * da[i];
    }
    for (std::size_t i = 0; i < layer.d_out(); ++i) {
      if (restricted && !(**lm)[i]) continue;
      auto brow = layer.b().row(i);
      auto drow = lg.db.row(i);
      for (std::size_t k = 0; k < brow.size(); ++k) brow[k] -= lr * drow[k];
    }
  }
}

Matrix full_rank_delta(const Matrix& a_t, const Matrix& b_t, const Matrix& a_prev,
                       const Matrix& b_prev) {
  require(a_t.rows() == a_prev.rows() && a_t.cols() == a_prev.cols(),
          "full_rank_delta: A shapes differ");
  require(b_t.rows() == b_prev.rows() && b_t.cols() == b_prev.cols(),
          "full_rank_delta: B shapes differ");
  return b_t * a_t - b_prev * a_prev;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> lora_offsets(const LoraNetwork& net) {
  std::vector<std::size_t> off{0};
  for (const auto& layer : net.layers()) off.push_back(off.back() + layer.lora_size());
  return off;
}

Vector flatten_lora(const LoraNetwork& net) {
  Vector flat;
  flat.reserve(net.lora_size());
  for (const auto& layer : net.layers()) {
    flat.insert(flat.end(), layer.a().data().begin(), layer.a().data().end());
    flat.insert(flat.end(), layer.b().data().begin(), layer.b().data().end());
  }
  return flat;
}

void assign_lora(LoraNetwork& net, std::span<const double> flat) {
  require(flat.size() == net.lora_size(), "assign_lora: length mismatch");
  std::size_t pos = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    for (double& v : layer.a().data()) v = flat[pos++];
    for (double& v : layer.b().data()) v = flat[pos++];
  }
}

Vector flatten_gradients(const Gradients& g) {
  Vector flat;
  for (const auto& lg : g.layers) {
    flat.insert(flat.end(), lg.da.data().begin(), lg.da.data().end());
    flat.insert(flat.end(), lg.db.data().begin(), lg.db.data().end());
  }
  return flat;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericalError("sha256: digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string frozen_digest(const LoraNetwork& net) {
  std::vector<unsigned char> bytes;
  auto append = [&](std::span<const double> v) {
    const auto* p = reinterpret_cast<const unsigned char*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size_bytes());
  };
  for (const auto& layer : net.layers()) {
    append(layer.w_base().data());
    append(layer.bias());
  }
  return sha256_hex(bytes);
}

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const LoraNetwork& net, std::ostream& out) {
  bin::put_magic(out, "FBLN");
  bin::put<std::uint32_t>(out, kCheckpointVersion);
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.num_layers()));
  for (const auto& layer : net.layers()) {
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.d_in()));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.d_out()));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.rank()));
    bin::put<std::uint8_t>(out, layer.activation() == Activation::relu ? 1 : 0);
    bin::put_f64s(out, layer.w_base().data());
    bin::put_f64s(out, layer.bias());
    bin::put_f64s(out, layer.a().data());
    bin::put_f64s(out, layer.b().data());
  }
}

LoraNetwork load_checkpoint(std::istream& in) {
  bin::expect_magic(in, "FBLN");
  const auto version = bin::get<std::uint32_t>(in);
  require(version == kCheckpointVersion, "load_checkpoint: unsupported version " + std::to_string(version));
  const auto n = bin::get<std::uint32_t>(in);
  require(n >= 1 && n <= 4096, "load_checkpoint: implausible layer count");
  std::vector<LoraLayer> layers;
  for (std::uint32_t l = 0; l < n; ++l) {
    const std::size_t d_in = bin::get<std::uint32_t>(in);
    const std::size_t d_out = bin::get<std::uint32_t>(in);
    const std::size_t rank = bin::get<std::uint32_t>(in);
    const auto act = bin::get<std::uint8_t>(in);
    require(act <= 1, "load_checkpoint: unknown activation tag");
    Matrix w(d_out, d_in);
    Vector bias(d_out);
    Matrix a(rank, d_in);
    Matrix b(d_out, rank);
    bin::get_f64s(in, w.data());
    bin::get_f64s(in, bias);
    bin::get_f64s(in, a.data());
    bin::get_f64s(in, b.data());
    layers.emplace_back(std::move(w), std::move(bias), std::move(a), std::move(b),
                        act == 1 ? Activation::relu : Activation::identity);
  }
  return LoraNetwork(std::move(layers));
}

}  // namespace fibec
