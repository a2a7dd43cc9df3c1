#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ltds/banks.hpp"
#include "ltds/data.hpp"
#include "ltds/gradcheck.hpp"
#include "ltds/losses.hpp"
#include "ltds/model.hpp"
#include "ltds/rng.hpp"

namespace ltds::meta {

enum class MetaMode { first_order, fd_exact };
const char* to_string(MetaMode m);
MetaMode meta_mode_from_string(const std::string& s);

/// Loss and optimizer toggles; the named rows follow the ablation table (a–l).
struct Ablation {
  bool use_dc = true;  // false selects plain cross-entropy
  bool use_z2s = true;
  bool use_s2s = true;
  bool use_s2z = true;
  bool use_aug = true;
  bool use_meta = true;
  bool single_prototype = false;
  bool unweighted_blend = false;

  /// 'a'..'l'.
  static Ablation row(char id);
  /// Accepts "a" or "row_a".
  static Ablation from_name(const std::string& name);
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
  double beta1 = 0.2;
  double beta2 = 0.1;
  double w1 = 0.1;
  double w2 = 0.1;
  double w3 = 0.1;
  double w4 = 0.1;
  double w_mte = 0.3;
  /// Epochs; one epoch is `steps_per_epoch` outer iterations.
  std::size_t t_max = 100;
  std::size_t t_sigma = 40;
  std::size_t steps_per_epoch = 1;
  std::size_t batch_size = 48;
  losses::ContrastiveParams cp;
  losses::AugParams ap;
  MetaMode meta_mode = MetaMode::first_order;
  Ablation ablation;
  std::size_t mte_size = 1;
  double prototype_ema = 0.5;
  /// β₂ is multiplied by lr_decay at each fraction of the total steps.
  std::vector<double> lr_milestones{0.4, 0.8};
  double lr_decay = 0.1;
  /// Validation accuracy is recorded every this many steps (0: only at the end).
  std::size_t eval_every = 0;
  double fd_eps = 1e-5;
  std::uint64_t seed = 0;

  void validate(std::size_t num_train_domains) const;
  std::size_t total_steps() const { return t_max * steps_per_epoch; }
  std::size_t sigma_step() const { return t_sigma * steps_per_epoch; }
  double beta2_at(std::size_t step) const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct MtrTerms {
  double cls = 0.0, z2s = 0.0, s2s = 0.0, s2z = 0.0, aug = 0.0, total = 0.0;
};
struct MteTerms {
  double cls = 0.0, z2s = 0.0, aug = 0.0, total = 0.0;
};

struct StepReport {
  std::size_t step = 0;
  MtrTerms mtr;
  MteTerms mte;
  std::vector<std::size_t> mtr_domains;
  std::vector<std::size_t> mte_domains;
  double grad_norm_mtr = 0.0;
  double grad_norm_mte = 0.0;
  double grad_norm = 0.0;
  double beta2 = 0.0;
  /// Meta-test samples drawn this step (0 when w_mte = 0 or meta is off).
  std::size_t mte_samples_read = 0;
};
std::string to_jsonl(const StepReport& r);

/// Everything the loss builders read besides parameters and data.
struct LossContext {
  const SemanticTable* table = nullptr;
  const losses::DomainClassCounts* counts = nullptr;
  const banks::PrototypeBank* bank = nullptr;
  /// Meta-train dataset domains and the bank slot holding each one's prototypes.
  std::vector<std::size_t> mtr_domains;
  std::vector<std::size_t> slots;
  /// Blended covariances; null while the augmentation is inactive.
  const std::vector<Matrix>* sigma_prime = nullptr;
  const TrainConfig* cfg = nullptr;
};

/// (D_mtr, D_mte), both ascending.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_domains(std::span<const std::size_t> domains,
                                                                             std::size_t mte_size, Rng& rng);

/// L_mtr as a function of the parameter blocks. `terms` receives the components of
/// the last evaluation; `log` the standardization moments.
LossFn meta_train_objective(const model::ModelParams& shape, const data::Batch& batch, const LossContext& ctx,
                            MtrTerms* terms = nullptr, model::MomentLog* log = nullptr);
/// L_mte as a function of θ'.
LossFn meta_test_objective(const model::ModelParams& shape, const data::Batch& batch, const LossContext& ctx,
                           MteTerms* terms = nullptr);

struct MtrResult {
  MtrTerms terms;
  GradResult grad;
  model::MomentLog moments;
};
struct MteResult {
  MteTerms terms;
  GradResult grad;
};

MtrResult meta_train_losses(const model::ModelParams& params, const data::Batch& batch, const LossContext& ctx);
/// Throws ProtocolError when the batch holds a meta-train domain.
MteResult meta_test_losses(const model::ModelParams& params_prime, const data::Batch& batch, const LossContext& ctx);

model::ModelParams inner_step(const model::ModelParams& params, const GradResult& grads, double beta1);

/// ∇L_mtr(θ) + w_mte·∇L_mte(θ'), the inner step treated as constant.
std::vector<Matrix> first_order_meta_gradient(const GradResult& mtr, const GradResult* mte, double w_mte);
/// Central differences of L_mtr(θ) + w_mte·L_mte(θ − β₁∇L_mtr(θ)) over every coordinate of θ.
std::vector<Matrix> fd_meta_gradient(const model::ModelParams& params, const data::Batch& mtr_batch,
                                     const data::Batch& mte_batch, const LossContext& ctx);
inline constexpr std::size_t kFdExactMaxParams = 512;

model::ModelParams outer_step(const model::ModelParams& params, std::span<const Matrix> meta_grad, double beta2);

/// Mutable training state; everything a checkpoint must hold.
struct TrainState {
  model::ModelParams params;
  banks::PrototypeBank prototypes;
  banks::CovarianceBank covariance;
  Rng rng;
  std::size_t step = 0;
  friend bool operator==(const TrainState&, const TrainState&) = default;
};

TrainState init_state(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& cfg);

/// One iteration of the training loop (Algorithm 1 when meta is on).
StepReport train_step(TrainState& state, const data::Dataset& ds, const TrainConfig& cfg);

struct ValidationPoint {
  std::size_t step = 0;
  double val_acc = 0.0;
};

struct RunOptions {
  /// Start from this state instead of a fresh initialization.
  std::optional<TrainState> resume;
  std::function<void(const StepReport&)> on_step;
  /// Called after each step with the updated state (used for periodic checkpoints).
  std::function<void(const TrainState&)> after_step;
};

struct RunResult {
  TrainState state;
  std::vector<ValidationPoint> history;
  std::vector<StepReport> reports;
};

RunResult run(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& cfg,
              const RunOptions& opts = {});

/// Validation-split accuracy (percent) with every training class known and no rejection.
double validation_accuracy(const model::ModelParams& params, const data::Dataset& ds);

}  // namespace ltds::meta
