#pragma once

#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "ltds/matrix.hpp"

namespace ltds {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Log-probabilities of a (optionally weighted) softmax.
///
/// With weights w the result is log(w_c·e^{z_c} / Σ_{w_j>0} w_j·e^{z_j}). Entries with
/// zero weight are left out of the normalizer and reported as -inf so the output keeps
/// the input's shape.
std::vector<double> log_softmax(std::span<const double> logits,
                                std::optional<std::span<const double>> weights = std::nullopt);

/// Softmax probabilities; same weighting rules as log_softmax, zero-weight entries get 0.
std::vector<double> softmax(std::span<const double> logits,
                            std::optional<std::span<const double>> weights = std::nullopt);

double logsumexp(std::span<const double> values);

inline constexpr double kNormEpsilon = 1e-12;

std::vector<double> unit_normalize(std::span<const double> v, double eps = kNormEpsilon);

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column i is the eigenvector of values[i]
};

/// Cyclic Jacobi rotations. Input must be square; symmetry is assumed (the upper
/// triangle drives the rotations).
SymmetricEigen symmetric_eigen(const Matrix& s, double tol = 1e-15, int max_sweeps = 100);

bool is_symmetric(const Matrix& m, double tol = 1e-10);

/// Throws DomainError unless m is symmetric within `sym_tol` and its smallest eigenvalue
/// is ≥ -psd_tol.
void require_psd(const Matrix& m, const char* what, double sym_tol = 1e-10, double psd_tol = 1e-10);

/// Symmetric PSD square root; eigenvalues in [-1e-10, 0) are clamped to 0.
Matrix psd_sqrt(const Matrix& s);

}  // namespace ltds
