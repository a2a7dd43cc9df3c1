#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ltds/autodiff.hpp"
#include "ltds/gradcheck.hpp"
#include "ltds/matrix.hpp"
#include "ltds/rng.hpp"

namespace ltds::model {

struct ModelConfig {
  std::size_t d_x = 16;
  std::vector<std::size_t> hidden{64};
  std::size_t d_v = 32;
  std::size_t d_s = 16;
  std::size_t num_classes = 20;
  bool use_batch_standardization = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Fully connected layer y = x·Wᵀ + b; W is out×in, b is 1×out.
struct Affine {
  Matrix w;
  Matrix b;
  friend bool operator==(const Affine&, const Affine&) = default;
};

/// Batch standardization parameters plus running statistics for evaluation.
struct Standardizer {
  Matrix gamma;
  Matrix beta;
  Matrix running_mean;
  Matrix running_var;
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Feature extractor f (rectified affine stack), classifier h, encoder e: Z→S
/// (affine, optional standardization, rectifier, unit normalization) and decoder
/// dec: S→Z (affine, optional standardization, rectifier).
struct ModelParams {
  ModelConfig config;
  std::vector<Affine> feature_layers;
  Affine classifier;
  Affine encoder;
  std::optional<Standardizer> encoder_norm;
  Affine decoder;
  std::optional<Standardizer> decoder_norm;

  /// Trainable blocks in a fixed order: f layers (W,b)…, h (W,b), e (W,b[,γ,β]),
  /// dec (W,b[,γ,β]).
  std::vector<Matrix> blocks() const;
  std::vector<std::string> block_names() const;
  /// Inverse of blocks(); running statistics are left untouched.
  void assign(std::span<const Matrix> blocks);
  std::size_t parameter_count() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Symmetric-uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in) for weights and biases.
ModelParams init_params(const ModelConfig& config, Rng& rng);

/// θ − lr·g, returned as a new snapshot.
ModelParams apply_step(const ModelParams& params, std::span<const Matrix> grads, double lr);
ModelParams apply_step(const ModelParams& params, const GradResult& grads, double lr);

/// Content hash of all blocks and running statistics (FNV-1a over the raw bytes).
std::uint64_t params_hash(const ModelParams& params);

enum class Mode { train, eval };

/// Batch statistics seen by standardization layers during one training evaluation.
struct MomentLog {
  std::vector<ad::BatchMoments> encoder;
  std::vector<ad::BatchMoments> decoder;
};

/// Model parameters bound to a tape. Built either from fresh leaves or from the
/// leaves handed to a LossFn.
class Bound {
 public:
  /// Leaves in blocks() order.
  Bound(const ModelParams& params, std::span<const ad::Var> leaves, Mode mode, MomentLog* log = nullptr);
  /// Registers every block as a constant.
  static Bound constant(ad::Tape& tape, const ModelParams& params, Mode mode = Mode::eval);

  ad::Var features(ad::Var x) const;
  ad::Var logits(ad::Var z) const;
  ad::Var encode(ad::Var z) const;
  ad::Var decode(ad::Var s) const;

  const ModelParams& params() const { return *params_; }
  ad::Var classifier_w() const { return classifier_w_; }
  ad::Var classifier_b() const { return classifier_b_; }
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Var standardize(ad::Var x, const Standardizer& s, ad::Var gamma, ad::Var beta,
                      std::vector<ad::BatchMoments>* sink) const;

  const ModelParams* params_;
  ad::Tape* tape_;
  Mode mode_;
  MomentLog* log_;
  std::vector<std::pair<ad::Var, ad::Var>> feature_;
  ad::Var classifier_w_, classifier_b_;
  ad::Var enc_w_, enc_b_, enc_gamma_, enc_beta_;
  ad::Var dec_w_, dec_b_, dec_gamma_, dec_beta_;
};

// Plain-value forward passes (evaluation-mode standardization).
Matrix forward_features(const ModelParams& params, const Matrix& x);
Matrix forward_logits(const ModelParams& params, const Matrix& z);
Matrix encode(const ModelParams& params, const Matrix& z);
Matrix decode(const ModelParams& params, const Matrix& s);

/// Folds logged batch moments into the running statistics (exponential average with
/// config.bn_momentum, one update per logged batch in order).
void update_running_stats(ModelParams& params, const MomentLog& log);

}  // namespace ltds::model
