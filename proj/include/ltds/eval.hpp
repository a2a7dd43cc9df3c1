#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ltds/banks.hpp"
#include "ltds/data.hpp"
#include "ltds/matrix.hpp"
#include "ltds/model.hpp"

namespace ltds::eval {

inline constexpr std::size_t kOpen = std::numeric_limits<std::size_t>::max();

struct OpenDecision {
  std::size_t label = kOpen;
  double confidence = 0.0;
  bool open() const noexcept { return label == kOpen; }
};

enum class Confidence { max_softmax, max_logit };

/// Softmax (or raw logits) restricted to the known classes; OPEN iff confidence < threshold.
OpenDecision predict_open(std::span<const double> logits, const std::vector<bool>& known, double threshold,
                          Confidence mode = Confidence::max_softmax);
/// Every class known.
OpenDecision predict_open(std::span<const double> logits, double threshold);

/// 2ab/(a+b), 0 when a + b = 0.
double harmonic_mean(double a, double b);

/// 0, 0.05, ..., 0.95.
std::vector<double> default_threshold_grid();

struct EvalOptions {
  double threshold = 0.5;
  /// Pick the threshold maximizing validation H over `grid` instead of using `threshold`.
  bool auto_threshold = false;
  std::vector<double> grid = default_threshold_grid();
  /// Pool samples across domains for Acc instead of averaging per-domain accuracies.
  bool pooled_acc = false;
  Confidence confidence = Confidence::max_softmax;
};

/// All percentages are in [0, 100].
struct MetricReport {
  double acc_u = 0.0;
  double acc = 0.0;
  double h = 0.0;
  /// a: exact-class accuracy on non-open samples, pooled over domains.
  double known_acc = 0.0;
  /// b: fraction of open-class samples rejected as OPEN.
  double open_acc = 0.0;
  /// True when the data has no open-class samples; h then equals acc.
  bool h_undefined = false;
  double threshold = 0.0;
  std::size_t heldout_domain = 0;
  std::vector<double> per_domain_acc;
  std::vector<double> per_class_acc;
  std::size_t num_samples = 0;
};

/// Scores a fixed set of predictions. `logits` rows align with `labels` and `domains`.
MetricReport score(const Matrix& logits, std::span<const std::size_t> labels, std::span<const std::size_t> domains,
                   const std::vector<bool>& known, std::size_t num_domains, std::size_t heldout_domain,
                   const EvalOptions& opts);

/// Leave-one-domain-out metrics on the test split. Y^tr excludes `heldout_domain`.
MetricReport evaluate(const model::ModelParams& params, const data::Dataset& ds, std::size_t heldout_domain,
                      const EvalOptions& opts);

std::string to_json(const MetricReport& r, int indent = 2);

/// Argmax of H over `grid` (ties to the smallest threshold). Without open samples H is
/// the known-class accuracy.
double select_threshold(const Matrix& logits, std::span<const std::size_t> labels, const std::vector<bool>& known,
                        std::span<const double> grid, Confidence mode = Confidence::max_softmax);
/// Uses the validation split of `ds`.
double select_threshold(const model::ModelParams& params, const data::Dataset& ds, std::span<const double> grid,
                        Confidence mode = Confidence::max_softmax);

/// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}).
double frechet_distance(std::span<const double> mu1, const Matrix& sigma1, std::span<const double> mu2,
                        const Matrix& sigma2);

/// d(i,j) = exp(−‖Σ_i − Σ_j‖_F).
Matrix covariance_distance_matrix(const banks::CovarianceBank& bank);

struct Retrieval {
  /// (sample index, similarity), descending similarity, ties to the lower index.
  std::vector<std::pair<std::size_t, double>> hits;
  bool truncated = false;
};

/// Nearest gallery samples by ⟨e(f(x_q)), e(f(x_g))⟩. `query_index`, if it appears in
/// the gallery, is skipped.
Retrieval topk_retrieval(std::span<const double> query, const model::ModelParams& params, const data::Dataset& ds,
                         std::span<const std::size_t> gallery, std::size_t k,
                         std::size_t query_index = std::numeric_limits<std::size_t>::max());

/// Writes `domain,label,z_0,...` for every sample.
void dump_features(const model::ModelParams& params, const data::Dataset& ds, const std::filesystem::path& path);

struct FeatureDump {
  std::vector<std::size_t> domains;
  std::vector<std::size_t> labels;
  Matrix z;
};
FeatureDump load_features(const std::filesystem::path& path);

}  // namespace ltds::eval
