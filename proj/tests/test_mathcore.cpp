#include <doctest.h>

#include <cmath>
#include <limits>

#include "ltds/autodiff.hpp"
#include "ltds/error.hpp"
#include "ltds/gradcheck.hpp"
#include "ltds/linalg.hpp"
#include "ltds/losses.hpp"
#include "ltds/matrix.hpp"
#include "ltds/rng.hpp"
#include "ltds/semantic.hpp"
#include "support.hpp"

using namespace ltds;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

void check_grad(const LossFn& f, const std::vector<Matrix>& params, double tol = 1e-6) {
  const GradResult a = grad(f, params);
  const GradResult n = fd_grad(f, params);
  CHECK(max_relative_error(a, n) < tol);
}

}  // namespace

TEST_CASE("matrix products match a straight-line oracle") {
  Rng rng(1);
  const Matrix a = test::random_matrix(rng, 4, 3);
  const Matrix b = test::random_matrix(rng, 3, 5);
  const Matrix c = test::random_matrix(rng, 5, 3);
  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-14);
  CHECK(max_abs_diff(matmul_nt(a, c), naive_matmul(a, c.transpose())) < 1e-14);
  CHECK(max_abs_diff(matmul_tn(a, a), naive_matmul(a.transpose(), a)) < 1e-14);
  CHECK(trace(Matrix::identity(4)) == 4.0);
  CHECK(frobenius_norm(Matrix{{3, 0}, {0, 4}}) == doctest::Approx(5.0));
  const std::vector<double> u{1, 2}, v{3, 4, 5};
  const Matrix o = outer(u, v);
  CHECK(o(1, 2) == 10.0);
}

TEST_CASE("log_softmax examples") {
  const std::vector<double> z{0, 0};
  auto r = log_softmax(z);
  CHECK(r[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  const std::vector<double> w31{3, 1};
  r = log_softmax(z, std::span<const double>(w31));
  CHECK(std::abs(r[0] - std::log(0.75)) < 1e-15);
  CHECK(std::abs(r[1] - std::log(0.25)) < 1e-15);

  const std::vector<double> z2{5, 100}, w10{1, 0};
  r = log_softmax(z2, std::span<const double>(w10));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == kNegInf);
}

TEST_CASE("log_softmax normalizes, is shift invariant and rejects bad input") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> z(7), w(7);
    for (auto& v : z) v = 10 * rng.normal();
    for (auto& v : w) v = rng.index(3) == 0 ? 0.0 : rng.uniform(0.5, 50);
    w[rng.index(7)] = 1.0;
    const auto a = log_softmax(z, std::span<const double>(w));
    long double s = 0;
    for (std::size_t i = 0; i < 7; ++i)
      if (w[i] > 0) s += std::exp(static_cast<long double>(a[i]));
    CHECK(std::abs(static_cast<double>(s) - 1.0) < 1e-12);
    std::vector<double> shifted = z;
    for (auto& v : shifted) v += 123.456;
    const auto b = log_softmax(shifted, std::span<const double>(w));
    for (std::size_t i = 0; i < 7; ++i)
      if (w[i] > 0) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
  const std::vector<double> z{1, 2}, zero{0, 0};
  CHECK_THROWS_AS(log_softmax(z, std::span<const double>(zero)), DomainError);
  const std::vector<double> bad{1, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(log_softmax(bad), InputError);
}

TEST_CASE("unit_normalize") {
  auto r = unit_normalize(std::vector<double>{3, 4});
  CHECK(r[0] == doctest::Approx(0.6));
  CHECK(r[1] == doctest::Approx(0.8));
  r = unit_normalize(std::vector<double>{2, 0, 0, 0});
  CHECK(r == std::vector<double>{1, 0, 0, 0});
  const std::vector<double> u{0.6, 0.8};
  r = unit_normalize(u);
  CHECK(std::abs(r[0] - 0.6) < 1e-15);
  CHECK(std::abs(norm2(r) - 1.0) < 1e-12);
  CHECK_THROWS_AS(unit_normalize(std::vector<double>{1e-13, 0}), DomainError);
}

TEST_CASE("symmetric_eigen reconstructs the matrix") {
  Rng rng(3);
  const Matrix s = test::random_psd(rng, 6);
  const SymmetricEigen e = symmetric_eigen(s);
  Matrix rec(6, 6);
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) rec(i, j) += e.values[k] * e.vectors(i, k) * e.vectors(j, k);
  CHECK(max_abs_diff(rec, s) < 1e-12);
  for (std::size_t k = 1; k < 6; ++k) CHECK(e.values[k - 1] <= e.values[k]);
}

TEST_CASE("psd_sqrt") {
  CHECK(max_abs_diff(psd_sqrt(Matrix::identity(3)), Matrix::identity(3)) < 1e-14);
  const Matrix r = psd_sqrt(Matrix{{4, 0}, {0, 9}});
  CHECK(max_abs_diff(r, Matrix{{2, 0}, {0, 3}}) < 1e-14);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const Matrix s = test::random_psd(rng, 5, 3.0);
    const Matrix q = psd_sqrt(s);
    CHECK(frobenius_norm(matmul(q, q) - s) <= 1e-8 * (1 + frobenius_norm(s)));
    CHECK(is_symmetric(q));
  }
  const std::vector<double> d{0.5, 2.0, 7.0};
  const Matrix diag = Matrix::diagonal(d);
  CHECK(max_abs_diff(psd_sqrt(matmul(diag, diag)), diag) < 1e-8);
  CHECK_THROWS_AS(psd_sqrt(Matrix{{1, 0.5}, {0, 1}}), DomainError);
  CHECK_THROWS_AS(psd_sqrt(Matrix{{1, 0}, {0, -1e-6}}), DomainError);
  CHECK_NOTHROW(psd_sqrt(Matrix{{1, 0}, {0, -1e-11}}));
}

TEST_CASE("rng streams are reproducible and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng p(7);
  const Rng before = p;
  Rng c1 = p.split(1), c2 = p.split(2), c1b = p.split(1);
  CHECK(p == before);
  CHECK(c1.next_u64() == c1b.next_u64());
  CHECK(c1.next_u64() != c2.next_u64());
  Rng r(9);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(r.index(7) < 7);
  }
  Rng saved(r.key(), r.counter());
  CHECK(saved.next_u64() == r.next_u64());
}

TEST_CASE("grad examples") {
  const std::vector<Matrix> params{Matrix{{1.5, -2.0, 0.25}}};
  const GradResult c = grad([](ad::Tape& t, std::span<const ad::Var>) { return t.constant(Matrix(1, 1, 3.0)); }, params);
  CHECK(c.value == 3.0);
  CHECK(max_abs_diff(c.grads[0], Matrix(1, 3)) == 0.0);

  const GradResult q = grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::scale(ad::sum_squares(p[0]), 0.5); },
                            params);
  CHECK(max_abs_diff(q.grads[0], params[0]) == 0.0);

  CHECK_THROWS_AS(grad([](ad::Tape&, std::span<const ad::Var> p) { return p[0]; }, params), ConstructionError);
  ad::Tape other;
  const ad::Var foreign = other.constant(Matrix(1, 1, 1.0));
  CHECK_THROWS_AS(grad([&](ad::Tape&, std::span<const ad::Var> p) { return ad::add(ad::sum_all(p[0]), foreign); },
                       params),
                  ConstructionError);
}

TEST_CASE("fd_grad examples") {
  const std::vector<Matrix> w{Matrix{{1.0}}};
  const LossFn lin = [](ad::Tape&, std::span<const ad::Var> p) { return ad::scale(ad::sum_all(p[0]), 3.25); };
  CHECK(std::abs(fd_grad(lin, w).grads[0][0] - 3.25) < 1e-10);
  const LossFn quad = [](ad::Tape&, std::span<const ad::Var> p) { return ad::scale(ad::sum_squares(p[0]), 0.5); };
  CHECK(std::abs(fd_grad(quad, w, 1e-5).grads[0][0] - 1.0) < 1e-9);
  CHECK_THROWS_AS(fd_grad(quad, w, 0.0), InputError);
  CHECK_THROWS_AS(fd_grad(quad, w, 0.1), InputError);
  const LossFn blowup = [](ad::Tape& t, std::span<const ad::Var> p) {
    return p[0].value()[0] > 1.0 ? t.constant(Matrix(1, 1, std::numeric_limits<double>::infinity()))
                                 : ad::sum_all(p[0]);
  };
  CHECK_THROWS_AS(fd_grad(blowup, w, 1e-5), InputError);
}

TEST_CASE("z2s gradient agrees with finite differences") {
  Rng rng(5);
  const std::vector<std::size_t> labels{0, 2, 1};
  const losses::ContrastiveParams cp{0.1, 0.5};
  const LossFn f = [&](ad::Tape&, std::span<const ad::Var> p) {
    return losses::z2s_loss_mean(ad::normalize_rows(p[0]), labels, ad::normalize_rows(p[1]), cp);
  };
  check_grad(f, {test::random_matrix(rng, 3, 4), test::random_matrix(rng, 4, 4)}, 1e-4);
}

TEST_CASE("primitive gradients match finite differences") {
  Rng rng(6);
  const Matrix x = test::random_matrix(rng, 5, 4);
  const Matrix w = test::random_matrix(rng, 3, 4);
  const Matrix b = test::random_matrix(rng, 1, 3);

  SUBCASE("affine") {
    check_grad([&](ad::Tape&, std::span<const ad::Var> p) { return ad::sum_squares(ad::affine(p[0], p[1], p[2])); },
               {x, w, b});
  }
  SUBCASE("relu away from the kink") {
    Matrix y = x;
    for (double& v : y.values())
      if (std::abs(v) < 0.05) v = 0.3;
    check_grad([&](ad::Tape&, std::span<const ad::Var> p) { return ad::sum_squares(ad::relu(p[0])); }, {y});
  }
  SUBCASE("normalize_rows") {
    const Matrix pr = test::random_matrix(rng, 5, 4);
    check_grad(
        [&](ad::Tape& t, std::span<const ad::Var> p) {
          ad::Var n = ad::normalize_rows(p[0]);
          return ad::sum_squares(ad::add(n, t.constant(pr)));
        },
        {x});
  }
  SUBCASE("batch_standardize") {
    const Matrix g = test::random_matrix(rng, 1, 4);
    const Matrix be = test::random_matrix(rng, 1, 4);
    const Matrix pr = test::random_matrix(rng, 5, 4);
    check_grad(
        [&](ad::Tape& t, std::span<const ad::Var> p) {
          ad::Var s = ad::batch_standardize(p[0], p[1], p[2], 1e-5);
          return ad::sum_squares(ad::add(s, t.constant(pr)));
        },
        {x, g, be});
  }
  SUBCASE("gather, overlay, concat, weighted_sum") {
    const std::vector<std::size_t> rows{4, 0, 4};
    const std::vector<std::size_t> idx{1, 3};
    check_grad(
        [&](ad::Tape&, std::span<const ad::Var> p) {
          ad::Var g = ad::gather_rows(p[0], rows);
          ad::Var o = ad::overlay_rows(p[0], ad::gather_rows(p[1], std::vector<std::size_t>{0, 2}), idx);
          const std::vector<ad::Var> parts{g, o};
          ad::Var c = ad::concat_rows(parts);
          const std::vector<std::pair<double, ad::Var>> terms{{0.7, ad::sum_squares(c)}, {-0.2, ad::mean_all(o)}};
          return ad::weighted_sum(terms);
        },
        {x, test::random_matrix(rng, 3, 4)});
  }
}

TEST_CASE("tape records the distance to the nearest relu kink") {
  ad::Tape t;
  ad::Var p = t.parameter(Matrix{{0.5, -0.002, 3.0}});
  ad::relu(p);
  CHECK(t.kink_margin() == doctest::Approx(0.002));
  ad::Tape u;
  ad::relu(u.constant(Matrix{{0.0}}));
  CHECK(std::isinf(u.kink_margin()));
}

TEST_CASE("cosine similarity and flatten") {
  const std::vector<Matrix> blocks{Matrix{{1, 2}}, Matrix{{3}}};
  CHECK(flatten(blocks) == std::vector<double>{1, 2, 3});
  const std::vector<double> a{1, 0}, b{0, 2}, c{3, 0};
  CHECK(cosine_similarity(a, b) == 0.0);
  CHECK(cosine_similarity(a, c) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{0, 0}), DomainError);
}

TEST_CASE("semantic table invariants") {
  CHECK_THROWS_AS(SemanticTable(Matrix{{1, 0}}), InputError);
  CHECK_THROWS_AS(SemanticTable(Matrix{{1, 0}, {0, 2}}), InputError);
  const SemanticTable t = SemanticTable::normalized(Matrix{{3, 4}, {0, 2}});
  CHECK(t.similarity(0, 1) == doctest::Approx(0.8));
  CHECK_THROWS_AS(SemanticTable::normalized(Matrix{{1, 0}, {0, 0}}), DomainError);
}
