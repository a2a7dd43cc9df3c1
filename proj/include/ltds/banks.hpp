#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ltds/autodiff.hpp"
#include "ltds/losses.hpp"
#include "ltds/matrix.hpp"
#include "ltds/model.hpp"
#include "ltds/semantic.hpp"

namespace ltds::banks {

/// Per-domain class prototypes v^n (C × d_v each) with presence masks M^n.
/// Masked-off rows stay zero and are never read.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(std::size_t num_domains, std::size_t num_classes, std::size_t dim, double ema = 0.5);
  /// Masks follow the positivity pattern of each counts row.
  static PrototypeBank from_counts(const losses::DomainClassCounts& counts, std::size_t dim, double ema = 0.5);
  /// One global slot whose mask is the union over `domains`.
  static PrototypeBank single(const losses::DomainClassCounts& counts, std::span<const std::size_t> domains,
                              std::size_t dim, double ema = 0.5);

  std::size_t num_domains() const noexcept { return v_.size(); }
  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t dim() const noexcept { return dim_; }
  double ema() const noexcept { return ema_; }

  bool mask(std::size_t domain, std::size_t cls) const;
  void set_mask(std::size_t domain, std::size_t cls, bool present);
  /// Classes with mask true, ascending.
  std::vector<std::size_t> present(std::size_t domain) const;
  const Matrix& prototypes(std::size_t domain) const;
  Matrix& prototypes(std::size_t domain);

  friend bool operator==(const PrototypeBank&, const PrototypeBank&) = default;

 private:
  void check(std::size_t domain, std::size_t cls) const;

  std::size_t classes_ = 0;
  std::size_t dim_ = 0;
  double ema_ = 0.5;
  std::vector<Matrix> v_;
  std::vector<char> mask_;
};

/// v_c ← ema·batchmean_c + (1−ema)·v_c for every class in the batch.
void update_prototypes(PrototypeBank& bank, std::size_t domain, const Matrix& features,
                       std::span<const std::size_t> labels);

/// Row c = e(v_c) where the mask is set, s_c elsewhere.
Matrix complete_semantic(const PrototypeBank& bank, const model::ModelParams& params, const SemanticTable& table,
                         std::size_t domain);
/// Tape version: gradients flow into the encoder (and into `table` if it is a parameter).
ad::Var complete_semantic(const model::Bound& model, const PrototypeBank& bank, ad::Var table, std::size_t domain);

/// Row-wise application of the decoder.
Matrix decode_prototypes(const Matrix& s_hat, const model::ModelParams& params);

/// Per-class streaming population mean and covariance, aggregated over all domains.
class CovarianceBank {
 public:
  CovarianceBank() = default;
  CovarianceBank(std::size_t num_classes, std::size_t dim);

  std::size_t num_classes() const noexcept { return n_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const double> mean(std::size_t cls) const { return mu_.row(cls); }
  const Matrix& means() const noexcept { return mu_; }
  const Matrix& covariance(std::size_t cls) const { return sigma_.at(cls); }
  long count(std::size_t cls) const { return n_.at(cls); }

  /// Direct state assignment for restoring checkpoints and building test fixtures.
  void set(std::size_t cls, std::span<const double> mean, const Matrix& sigma, long count);

  friend bool operator==(const CovarianceBank&, const CovarianceBank&) = default;

 private:
  friend void update_covariance(CovarianceBank&, const Matrix&, std::span<const std::size_t>);
  std::size_t dim_ = 0;
  Matrix mu_;
  std::vector<Matrix> sigma_;
  std::vector<long> n_;
};

void update_covariance(CovarianceBank& bank, const Matrix& features, std::span<const std::size_t> labels);

struct BlendResult {
  std::vector<Matrix> sigma;
  /// Classes whose top-k neighbours all had zero counts; their Σ' is zero.
  std::vector<std::size_t> empty_classes;
};

/// Indices of the k most similar classes to `cls` (itself first, then descending
/// similarity with ties to the lower index).
std::vector<std::size_t> topk_classes(const SemanticTable& table, std::size_t cls, std::size_t k);

/// Σ'_c = Σ_{i∈top-k(c)} n_i Σ_i / Σ n_i, or the plain mean over top-k(c) when `weighted` is false.
BlendResult blend_covariance(const CovarianceBank& bank, const SemanticTable& table, std::size_t k, bool weighted);

}  // namespace ltds::banks
