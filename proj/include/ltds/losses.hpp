#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ltds/autodiff.hpp"
#include "ltds/matrix.hpp"
#include "ltds/model.hpp"
#include "ltds/semantic.hpp"

namespace ltds::losses {

/// Training sample counts n_c^d for every (domain, class). A zero entry marks a class
/// unseen in that domain.
class DomainClassCounts {
 public:
  DomainClassCounts() = default;
  DomainClassCounts(std::size_t num_domains, std::size_t num_classes);
  DomainClassCounts(std::size_t num_domains, std::size_t num_classes, std::vector<long> counts);

  std::size_t num_domains() const noexcept { return domains_; }
  std::size_t num_classes() const noexcept { return classes_; }
  long at(std::size_t domain, std::size_t cls) const;
  long& at(std::size_t domain, std::size_t cls);
  std::span<const long> row(std::size_t domain) const;
  /// Row as float weights, ready for a weighted softmax.
  std::vector<double> weights(std::size_t domain) const;
  bool present(std::size_t domain, std::size_t cls) const { return at(domain, cls) > 0; }
  long domain_total(std::size_t domain) const;
  long class_total(std::size_t cls) const;

  friend bool operator==(const DomainClassCounts&, const DomainClassCounts&) = default;

 private:
  std::size_t domains_ = 0;
  std::size_t classes_ = 0;
  std::vector<long> counts_;
};

/// Margin α and temperature τ of the contrastive alignment losses.
struct ContrastiveParams {
  double alpha = 0.1;
  double tau = 1.0 / 30.0;
  void validate() const;
};

/// Which denominator the augmentation surrogate uses.
///  - derivation: w_cᵀf + b_c + (λ/2)Δw_cᵀΣ'Δw_c, reduces to cross-entropy at λ = 0.
///  - as_printed: w_yᵀf + b_y + (λ/2)Δw_cᵀΣ'Δw_c for every c (the feature term cancels).
enum class AugDenominator { derivation, as_printed };

struct AugParams {
  double lambda = 5.0;
  std::size_t k = 5;
  AugDenominator variant = AugDenominator::derivation;
  void validate(std::size_t num_classes) const;
};

/// Loss value with the gradient with respect to a vector input.
struct VectorGrad {
  double value = 0.0;
  std::vector<double> grad;
};

// ---------------------------------------------------------------------------
// Scalar kernels.

/// −log( n_y e^{z_y} / Σ_{n_c>0} n_c e^{z_c} ).
double dc_loss(std::span<const double> logits, std::size_t label, std::size_t domain,
               const DomainClassCounts& counts);
VectorGrad dc_loss_grad(std::span<const double> logits, std::size_t label, std::span<const double> weights);

double cross_entropy(std::span<const double> logits, std::size_t label);
VectorGrad cross_entropy_grad(std::span<const double> logits, std::size_t label);

/// Margin contrastive loss of a unit embedding against the semantic table.
double z2s_loss(std::span<const double> embedding, std::size_t label, const SemanticTable& table,
                const ContrastiveParams& cp);

struct Z2SGrad {
  double value = 0.0;
  std::vector<double> d_embedding;
  Matrix d_table;
};
Z2SGrad z2s_kernel(std::span<const double> embedding, std::size_t label, const Matrix& table,
                   const ContrastiveParams& cp);

/// Cross-prototype contrastive loss, mean over classes.
double s2s_loss(const Matrix& s_m, const Matrix& s_n, const ContrastiveParams& cp);

struct S2SGrad {
  double value = 0.0;
  Matrix d_m;
  Matrix d_n;
};
S2SGrad s2s_kernel(const Matrix& s_m, const Matrix& s_n, const ContrastiveParams& cp);

/// Cycle loss on reconstructed prototypes: mean_i CE(h(v̂_i), i) + s2s(e(v̂), s).
double s2z_loss(const Matrix& v_hat, const model::ModelParams& params, const SemanticTable& table,
                const ContrastiveParams& cp);

/// Implicit semantic augmentation surrogate for one sample.
double aug_loss(std::span<const double> feature, std::size_t label, const Matrix& w, const Matrix& b,
                const Matrix& sigma_prime, const AugParams& ap);

struct AugGrad {
  double value = 0.0;
  std::vector<double> d_feature;
  Matrix d_w;
  Matrix d_b;
};
AugGrad aug_kernel(std::span<const double> feature, std::size_t label, const Matrix& w, const Matrix& b,
                   const Matrix& sigma_prime, double lambda, AugDenominator variant);

/// log Σ_c exp(Δw_cᵀμ_y + Δb_c + (λ/2)Δw_cᵀΣ_yΔw_c): upper bound on the expected
/// cross-entropy when f ~ N(μ_y, λΣ_y).
double aug_bound(std::span<const double> mu_y, const Matrix& sigma_y, const Matrix& w, const Matrix& b,
                 std::size_t label, double lambda);

// ---------------------------------------------------------------------------
// Tape operations (batch means).

ad::Var dc_loss_mean(ad::Var logits, std::span<const std::size_t> labels,
                     std::span<const std::size_t> domains, const DomainClassCounts& counts);
ad::Var ce_loss_mean(ad::Var logits, std::span<const std::size_t> labels);
ad::Var z2s_loss_mean(ad::Var embeddings, std::span<const std::size_t> labels, ad::Var table,
                      const ContrastiveParams& cp);
ad::Var s2s_loss(ad::Var s_m, ad::Var s_n, const ContrastiveParams& cp);
ad::Var s2z_loss(const model::Bound& model, ad::Var v_hat, ad::Var table, const ContrastiveParams& cp);
/// `sigma_prime[c]` is the blended covariance of class c. PSD is not re-checked here.
ad::Var aug_loss_mean(ad::Var features, std::span<const std::size_t> labels, ad::Var w, ad::Var b,
                      std::span<const Matrix> sigma_prime, double lambda, AugDenominator variant);

}  // namespace ltds::losses
