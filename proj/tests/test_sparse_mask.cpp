#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "fibec/errors.hpp"
#include "fibec/sparse_mask.hpp"
#include "helpers.hpp"

using namespace fibec;
using namespace testing;

namespace {

GalDecision gal_of(std::vector<std::size_t> layers) {
  GalDecision g;
  g.layers = std::move(layers);
  g.n_star = g.layers.size();
  return g;
}

}  // namespace

TEST_CASE("ratio_from_rank examples") {
  CHECK(ratio_from_rank(24, 24) == 0.0);
  CHECK(ratio_from_rank(0, 8) == 1.0 - 1.0 / 8.0);
  CHECK(ratio_from_rank(1, 8) == 1.0 - 1.0 / 8.0);
  CHECK(ratio_from_rank(6, 24) == 0.75);
  CHECK_THROWS_AS(ratio_from_rank(3, 2), ContractViolation);
  CHECK_THROWS_AS(ratio_from_rank(0, 0), ContractViolation);
}

TEST_CASE("layer_ratio_from_block applies the eigengap rule") {
  Matrix block(4, 4);
  block(0, 0) = 0.0;
  block(1, 1) = 1.0;
  block(2, 2) = 2.0;
  block(3, 3) = 10.0;
  // zero eigenvalue dropped: spectrum (1, 2, 10), rank 3; gap 8 > 4 after the second
  const LayerRatio r = layer_ratio_from_block(block, 1.0);
  CHECK(r.rank == 3);
  CHECK(r.r == 2);
  CHECK(r.rho == doctest::Approx(1.0 / 3.0));
  const LayerRatio none = layer_ratio_from_block(block, 100.0);
  CHECK(none.r == none.rank);
  CHECK(none.rho == 0.0);
}

TEST_CASE("build_mask examples") {
  CHECK(build_mask(Vector{3, 1, 2}, 1.0) == std::vector<bool>{true, true, true});
  CHECK(build_mask(Vector{5, 1, 9}, 2.0 / 3.0) == std::vector<bool>{true, false, true});
  CHECK(build_mask(Vector{5, 1, 9}, 0.0) == std::vector<bool>{false, false, true});
  CHECK(build_mask(Vector{2, 2, 2, 2}, 0.5) == std::vector<bool>{true, true, false, false});
  CHECK_THROWS_AS(build_mask(Vector{}, 0.5), ContractViolation);
  CHECK_THROWS_AS(build_mask(Vector{1}, 1.5), ContractViolation);

  Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector s = random_vector(1 + rng.index(20), rng);
    const double rho = rng.uniform();
    const auto m = build_mask(s, rho);
    CHECK(m == build_mask(s, rho));
    const auto pop = static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(rho * static_cast<double>(s.size()))));
    CHECK(pop == std::min(want, s.size()));
    // every selected score beats every unselected one
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < s.size(); ++j)
        if (m[i] && !m[j]) CHECK(s[i] >= s[j]);
  }
}

TEST_CASE("masked_param_count") {
  Rng rng(62);
  const LoraNetwork net = random_net({4, 5, 3, 2}, 2, rng);
  const std::size_t total = net.lora_size();
  const NeuronMask full = full_mask(net);

  ParamCount pc = masked_param_count(net, gal_of({0, 1, 2}), full);
  CHECK(pc.frozen == 0);
  CHECK(pc.trainable == total);

  NeuronMask single;
  for (const auto& l : net.layers()) {
    std::vector<bool> m(l.d_out(), false);
    m[0] = true;
    single.emplace_back(std::move(m));
  }
  pc = masked_param_count(net, gal_of({}), single);
  std::size_t expect = 0;
  for (const auto& l : net.layers()) expect += l.rank() + l.a().size();
  CHECK(pc.trainable == expect);
  CHECK(pc.trainable + pc.frozen == total);

  NeuronMask off;
  for (const auto& l : net.layers()) off.emplace_back(std::vector<bool>(l.d_out(), false));
  pc = masked_param_count(net, gal_of({1}), off);
  CHECK(pc.trainable == net.layer(1).lora_size());

  for (int trial = 0; trial < 100; ++trial) {
    NeuronMask m;
    for (const auto& l : net.layers()) {
      if (rng.uniform() < 0.3) {
        m.emplace_back(std::nullopt);
        continue;
      }
      std::vector<bool> v(l.d_out());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform() < 0.5;
      m.emplace_back(std::move(v));
    }
    std::vector<std::size_t> layers;
    for (std::size_t l = 0; l < 3; ++l)
      if (rng.uniform() < 0.3) layers.push_back(l);
    pc = masked_param_count(net, gal_of(layers), m);
    CHECK(pc.trainable + pc.frozen == total);
  }
}

TEST_CASE("masked training only moves the counted entries") {
  Rng rng(63);
  LoraNetwork net = random_net({4, 5, 3}, 2, rng);
  const LoraNetwork before = net;
  const NeuronMask mask{std::vector<bool>{false, true, false, false, true}, std::nullopt};
  for (int i = 0; i < 10; ++i)
    apply_update(net, backward(net, random_vector(4, rng), rng.index(3), &mask), 0.1, &mask);
  std::size_t changed = 0;
  const Vector a = flatten_lora(before);
  const Vector b = flatten_lora(net);
  for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i];
  const ParamCount pc = masked_param_count(net, gal_of({1}), mask);
  CHECK(changed <= pc.trainable);
  for (std::size_t row : {0, 2, 3}) CHECK(net.layer(0).b().row(row)[0] == before.layer(0).b().row(row)[0]);
}

TEST_CASE("layer_ratio matches the whole-model Hessian block") {
  Rng rng(64);
  const LoraNetwork net = random_net({3, 4, 3}, 2, rng);
  const Dataset ds = random_dataset(10, 3, 3, rng);
  const Matrix whole = finite_diff_hessian(
      [&](const Vector& flat) { return local_loss_gradient_at(net, ds.samples, flat); }, flatten_lora(net));
  const auto offsets = lora_offsets(net);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Matrix block = hessian_block(whole, offsets, l);
    CHECK(block.rows() == net.layer(l).lora_size());
    for (double lip : {0.0, 0.01, 1.0}) {
      const LayerRatio direct = layer_ratio(net, ds.samples, l, lip);
      const LayerRatio reused = layer_ratio_from_block(block, lip);
      CHECK(direct.rank == reused.rank);
      CHECK(direct.r == reused.r);
      CHECK(direct.rho >= 0.0);
      CHECK(direct.rho <= 1.0);
    }
  }
  CHECK_THROWS_AS(hessian_block(whole, offsets, 2), ContractViolation);
}
