#include "ltds/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ltds/error.hpp"

namespace ltds {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InputError(std::string(what) + ": non-finite input");
}

}  // namespace

std::vector<double> log_softmax(std::span<const double> logits,
                                std::optional<std::span<const double>> weights) {
  require_finite(logits, "log_softmax");
  if (weights) {
    if (weights->size() != logits.size()) throw InputError("log_softmax: weight length mismatch");
    for (double w : *weights)
      if (!std::isfinite(w) || w < 0.0) throw InputError("log_softmax: weights must be finite and >= 0");
  }
  const auto weight = [&](std::size_t i) { return weights ? (*weights)[i] : 1.0; };

  double shift = kNegInf;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double w = weight(i);
    if (w > 0.0) shift = std::max(shift, logits[i] + std::log(w));
  }
  if (shift == kNegInf) throw DomainError("log_softmax: all weights are zero");

  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double w = weight(i);
    if (w > 0.0) total += std::exp(logits[i] + std::log(w) - shift);
  }
  const double log_norm = shift + std::log(total);

  std::vector<double> out(logits.size(), kNegInf);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double w = weight(i);
    if (w > 0.0) out[i] = logits[i] + std::log(w) - log_norm;
  }
  return out;
}

std::vector<double> softmax(std::span<const double> logits,
                            std::optional<std::span<const double>> weights) {
  auto out = log_softmax(logits, weights);
  for (double& v : out) v = (v == kNegInf) ? 0.0 : std::exp(v);
  return out;
}

double logsumexp(std::span<const double> values) {
  if (values.empty()) throw InputError("logsumexp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> unit_normalize(std::span<const double> v, double eps) {
  require_finite(v, "unit_normalize");
  const double n = norm2(v);
  if (!(n > eps)) throw DomainError("unit_normalize: norm " + std::to_string(n) + " below epsilon");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

SymmetricEigen symmetric_eigen(const Matrix& s, double tol, int max_sweeps) {
  if (s.rows() != s.cols()) throw InputError("symmetric_eigen: matrix not square");
  if (!s.all_finite()) throw InputError("symmetric_eigen: non-finite input");
  const std::size_t n = s.rows();
  Matrix a = s;
  // Symmetrize from the upper triangle so tiny asymmetries cannot stall convergence.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(j, i) = a(i, j);
  Matrix v = Matrix::identity(n);

  const double scale = std::max(frobenius_norm(a), 1e-300);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= tol * scale) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
  SymmetricEigen out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    out.values[i] = a(order[i], order[i]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, i) = v(k, order[i]);
  }
  return out;
}

bool is_symmetric(const Matrix& m, double tol) {
  if (m.rows() != m.cols()) return false;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > tol) return false;
  return true;
}

void require_psd(const Matrix& m, const char* what, double sym_tol, double psd_tol) {
  if (!is_symmetric(m, sym_tol)) throw DomainError(std::string(what) + ": matrix is not symmetric");
  if (m.rows() == 0) return;
  const auto eig = symmetric_eigen(m);
  if (eig.values.front() < -psd_tol) {
    throw DomainError(std::string(what) + ": matrix is indefinite (min eigenvalue " +
                      std::to_string(eig.values.front()) + ")");
  }
}

Matrix psd_sqrt(const Matrix& s) {
  if (!is_symmetric(s, 1e-10)) throw DomainError("psd_sqrt: matrix is not symmetric");
  const std::size_t n = s.rows();
  const auto eig = symmetric_eigen(s);
  Matrix r(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double lambda = eig.values[i];
    if (lambda < -1e-10) {
      throw DomainError("psd_sqrt: matrix is indefinite (eigenvalue " + std::to_string(lambda) + ")");
    }
    const double root = std::sqrt(std::max(lambda, 0.0));
    if (root == 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      const double va = eig.vectors(a, i) * root;
      for (std::size_t b = 0; b < n; ++b) r(a, b) += va * eig.vectors(b, i);
    }
  }
  // Exact symmetry for downstream checks.
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) r(a, b) = r(b, a) = 0.5 * (r(a, b) + r(b, a));
  return r;
}

}  // namespace ltds
