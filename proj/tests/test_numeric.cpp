#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "fibec/errors.hpp"
#include "fibec/numeric.hpp"

using namespace fibec;

namespace {

Matrix random_symmetric(std::size_t n, Rng& rng) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) m(i, j) = m(j, i) = rng.normal();
  return m;
}

Matrix diag(const Vector& v) {
  Matrix m(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m(i, i) = v[i];
  return m;
}

}  // namespace

TEST_CASE("matrix arithmetic") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0, 1}, {1, 0}});
  CHECK(a * b == Matrix::from_rows({{2, 1}, {4, 3}}));
  CHECK(a + b == Matrix::from_rows({{1, 3}, {4, 4}}));
  CHECK(a - b == Matrix::from_rows({{1, 1}, {2, 4}}));
  CHECK(2.0 * a == Matrix::from_rows({{2, 4}, {6, 8}}));
  CHECK(a.transpose() == Matrix::from_rows({{1, 3}, {2, 4}}));
  CHECK(matvec(a, Vector{1, 1}) == Vector{3, 7});
  CHECK(matvec_transposed(a, Vector{1, 1}) == Vector{4, 6});
  CHECK(a.frobenius_norm() == doctest::Approx(std::sqrt(30.0)));
  CHECK(norm_inf(Vector{-5, 2}) == 5.0);
  CHECK(dot(Vector{1, 2}, Vector{3, 4}) == 11.0);
  CHECK_THROWS_AS(a * Matrix(3, 1), ContractViolation);
  CHECK_THROWS_AS(Matrix(2, 2, Vector{1, 2, 3}), ContractViolation);
}

TEST_CASE("eigh_symmetric examples") {
  auto e = eigh_symmetric(Matrix::identity(2));
  CHECK(e.values[0] == doctest::Approx(1.0));
  CHECK(e.values[1] == doctest::Approx(1.0));

  e = eigh_symmetric(diag({3, -1}));
  CHECK(e.values[0] == doctest::Approx(-1.0));
  CHECK(e.values[1] == doctest::Approx(3.0));

  e = eigh_symmetric(Matrix::from_rows({{2, 1}, {1, 2}}));
  CHECK(e.values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e.values[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("eigh_symmetric rejects bad input") {
  CHECK_THROWS_AS(eigh_symmetric(Matrix(2, 3)), ContractViolation);
  CHECK_THROWS_AS(eigh_symmetric(Matrix::from_rows({{1, 2}, {0, 1}})), ContractViolation);
}

TEST_CASE("eigh_symmetric invariants on random matrices") {
  Rng rng(7);
  for (std::size_t trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.index(30);
    const Matrix m = random_symmetric(n, rng);
    const auto e = eigh_symmetric(m);
    for (std::size_t i = 1; i < n; ++i) CHECK(e.values[i - 1] <= e.values[i]);

    double tr = 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      tr += m(i, i);
      sum += e.values[i];
    }
    CHECK(std::abs(sum - tr) <= 1e-8 * std::max(1.0, std::abs(tr)));

    const Matrix& v = e.vectors;
    const Matrix vtv = v.transpose() * v;
    CHECK((vtv - Matrix::identity(n)).frobenius_norm() <= 1e-8);
    const Matrix recon = v * diag(e.values) * v.transpose();
    CHECK((recon - m).frobenius_norm() <= 1e-8 * std::max(1.0, m.frobenius_norm()));
  }
}

TEST_CASE("finite_diff_gradient examples") {
  auto sq = [](const Vector& x) { return dot(x, x); };
  Vector g = finite_diff_gradient(sq, {1, 2}, 1e-5);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-6));

  g = finite_diff_gradient([](const Vector&) { return 7.0; }, {0.3, -2, 5});
  for (double v : g) CHECK(v == 0.0);

  g = finite_diff_gradient([](const Vector& x) { return x[0] * x[1]; }, {3, 5});
  CHECK(g[0] == doctest::Approx(5.0).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(3.0).epsilon(1e-8));

  CHECK_THROWS_AS(finite_diff_gradient([](const Vector& x) { return x[0] > 1 ? NAN : 0.0; }, {1.0}),
                  NumericalError);
}

TEST_CASE("finite_diff_hessian examples") {
  Matrix h = finite_diff_hessian([](const Vector& x) { return Vector{2 * x[0], 2 * x[1]}; }, {0.5, -1});
  CHECK((h - 2.0 * Matrix::identity(2)).frobenius_norm() <= 1e-4);

  const Matrix j = Matrix::from_rows({{1, 2}, {4, 3}});
  h = finite_diff_hessian([&](const Vector& x) { return matvec(j, x); }, {1, 1});
  const Matrix sym = 0.5 * (j + j.transpose());
  CHECK((h - sym).frobenius_norm() <= 1e-9);

  // f = x0^2 x1
  h = finite_diff_hessian([](const Vector& x) { return Vector{2 * x[0] * x[1], x[0] * x[0]}; }, {1, 1});
  CHECK((h - Matrix::from_rows({{2, 2}, {2, 0}})).frobenius_norm() <= 1e-3);
  CHECK(h(0, 1) == h(1, 0));
}

TEST_CASE("default fd step") {
  CHECK(default_fd_step(Vector{0.1, -0.2}) == 1e-5);
  CHECK(default_fd_step(Vector{10, -30}) == doctest::Approx(3e-4));
}

TEST_CASE("Rng determinism over a million draws") {
  Rng a(123456789);
  Rng b(123456789);
  bool same = true;
  for (int i = 0; i < 1000000; ++i) same = same && a.next_u64() == b.next_u64();
  CHECK(same);

  Rng c(5);
  Rng d(5);
  for (int i = 0; i < 1000; ++i) {
    const double x = c.normal();
    const double y = d.normal();
    CHECK(std::memcmp(&x, &y, sizeof x) == 0);
  }
}

TEST_CASE("Rng derive is independent of parent state") {
  Rng a(9);
  const Rng d1 = a.derive(4);
  a.next_u64();
  const Rng d2 = a.derive(4);
  CHECK(d1.seed() == d2.seed());
  CHECK(a.derive(4).seed() != a.derive(5).seed());
}

TEST_CASE("Rng ranges") {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.index(7) < 7);
    CHECK(rng.gamma(0.5) >= 0.0);
  }
}
