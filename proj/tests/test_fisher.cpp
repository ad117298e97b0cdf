#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "fibec/errors.hpp"
#include "fibec/fisher.hpp"
#include "helpers.hpp"

using namespace fibec;
using namespace testing;

namespace {

FimDiag single_layer(Vector entries, std::size_t row_width) {
  return FimDiag{{std::move(entries)}, {row_width}};
}

}  // namespace

TEST_CASE("sample_fim_diag matches squared finite differences in W") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const LoraNetwork net = random_small_net(rng);
    const Vector x = random_vector(net.input_dim(), rng);
    const std::size_t label = rng.index(net.num_classes());
    const FimDiag fd = sample_fim_diag(net, x, label);
    REQUIRE(fd.layers.size() == net.num_layers());
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const Vector w(net.layer(l).w_base().data().begin(), net.layer(l).w_base().data().end());
      const Vector g = finite_diff_gradient([&](const Vector& p) { return loss_with_w(net, l, p, x, label); }, w);
      REQUIRE(fd.layers[l].size() == g.size());
      CHECK(fd.row_width[l] == net.layer(l).d_in());
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(close(fd.layers[l][i], g[i] * g[i]));
    }
  }
}

TEST_CASE("trace equals the squared norm of the W-layout gradient") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const LoraNetwork net = random_small_net(rng);
    const Vector x = random_vector(net.input_dim(), rng);
    const std::size_t label = rng.index(net.num_classes());
    const Backprop bp = backprop(net, x, label);
    double sq = 0.0;
    for (std::size_t l = 0; l < net.num_layers(); ++l)
      for (double d : bp.deltas[l])
        for (double xi : bp.inputs[l]) sq += (d * xi) * (d * xi);
    const FimDiag fd = sample_fim_diag(net, x, label);
    CHECK(std::abs(sample_score(fd) - sq) <= 1e-10 * std::max(1.0, sq));
    CHECK(fd.trace() == sample_score(fd));
    for (const auto& layer : fd.layers)
      for (double v : layer) CHECK(v >= 0.0);
  }
}

TEST_CASE("zero gradient gives an all-zero diagonal") {
  // Saturated single layer: the softmax gradient underflows to exactly zero.
  const Matrix w = Matrix::from_rows({{1000, 0}, {0, -1000}});
  const LoraNetwork net({LoraLayer(w, {0, 0}, Matrix(1, 2), Matrix(2, 1), Activation::identity)});
  const FimDiag fd = sample_fim_diag(net, Vector{1, 1}, 0);
  CHECK(fd.trace() == 0.0);
}

TEST_CASE("single parameter with gradient 3 has diagonal 9") {
  // One input, two classes, logits (w x, 0): d loss / d w = (p0 - 1) x. Pick x so that equals -3.
  const double w0 = 0.0;
  const Matrix w = Matrix::from_rows({{w0}, {0}});
  const LoraNetwork net({LoraLayer(w, {0, 0}, Matrix(1, 1), Matrix(2, 1), Activation::identity)});
  const FimDiag fd = sample_fim_diag(net, Vector{6.0}, 0);  // p0 = 0.5 at w = 0
  CHECK(fd.layers[0][0] == doctest::Approx(9.0));
}

TEST_CASE("sample and batch scores") {
  CHECK(sample_score(single_layer({0, 0, 0}, 3)) == 0.0);
  CHECK(sample_score(single_layer({1, 2, 3}, 3)) == 6.0);
  CHECK(batch_score(Vector{5}) == 5.0);
  CHECK(batch_score(Vector{1, 2, 3}) == 6.0);
  Vector s{0.3, 1.7, 2.2, 0.9};
  const double ref = batch_score(s);
  std::sort(s.begin(), s.end());
  do {
    CHECK(batch_score(s) == doctest::Approx(ref).epsilon(1e-15));
  } while (std::next_permutation(s.begin(), s.end()));
  CHECK_THROWS_AS(batch_score(Vector{}), ContractViolation);
}

TEST_CASE("empirical fim is the sample mean") {
  Rng rng(23);
  const LoraNetwork net = random_net({3, 4, 2}, 2, rng);
  const Dataset ds = random_dataset(5, 3, 2, rng);
  const FimDiag mean = empirical_fim_diag(net, ds.samples);
  FimDiag sum = FimDiag::zeros_like(net);
  for (const auto& s : ds.samples) {
    const FimDiag one = sample_fim_diag(net, s.x, s.label);
    for (std::size_t l = 0; l < sum.layers.size(); ++l)
      for (std::size_t i = 0; i < sum.layers[l].size(); ++i) sum.layers[l][i] += one.layers[l][i];
  }
  for (std::size_t l = 0; l < sum.layers.size(); ++l)
    for (std::size_t i = 0; i < sum.layers[l].size(); ++i)
      CHECK(mean.layers[l][i] == doctest::Approx(sum.layers[l][i] / 5.0).epsilon(1e-12));
}

TEST_CASE("momentum_update examples") {
  const FimDiag prev = single_layer({2, 2}, 2);
  const FimDiag fresh = single_layer({4, 6}, 2);
  CHECK(momentum_update(std::nullopt, fresh, 0.9).layers == fresh.layers);
  CHECK(momentum_update(prev, fresh, 0.0).layers == fresh.layers);
  CHECK(momentum_update(prev, fresh, 1.0).layers == prev.layers);
  CHECK(momentum_update(prev, fresh, 0.5).layers[0][0] == 3.0);
  CHECK_THROWS_AS(momentum_update(single_layer({1}, 1), fresh, 0.5), ContractViolation);
  CHECK_THROWS_AS(momentum_update(prev, fresh, 1.5), ContractViolation);
}

TEST_CASE("neuron_scores are row sums") {
  const FimDiag fd = single_layer({1, 2, 3, 4, 5, 6}, 3);
  CHECK(neuron_scores(fd, 0) == Vector{6, 15});
  CHECK(neuron_scores(single_layer(Vector(6, 0.0), 2), 0) == Vector{0, 0, 0});
  CHECK_THROWS_AS(neuron_scores(fd, 1), ContractViolation);

  Rng rng(24);
  const LoraNetwork net = random_net({4, 5, 3}, 2, rng);
  const FimDiag real = sample_fim_diag(net, random_vector(4, rng), 1);
  for (std::size_t l = 0; l < real.layers.size(); ++l) {
    const Vector ns = neuron_scores(real, l);
    double total = 0.0;
    double layer_trace = 0.0;
    for (double v : ns) {
      CHECK(v >= 0.0);
      total += v;
    }
    for (double v : real.layers[l]) layer_trace += v;
    CHECK(std::abs(total - layer_trace) <= 1e-12 * std::max(1.0, layer_trace));
  }
}
