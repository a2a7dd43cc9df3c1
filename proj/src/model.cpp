#include "ltds/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>

#include "ltds/error.hpp"

namespace ltds::model {

void ModelConfig::validate() const {
  if (d_x < 1) throw ConfigError("model.d_x", "must be >= 1");
  if (d_v < 1) throw ConfigError("model.d_v", "must be >= 1");
  if (d_s < 1) throw ConfigError("model.d_s", "must be >= 1");
  if (num_classes < 1) throw ConfigError("model.num_classes", "must be >= 1");
  for (std::size_t h : hidden)
    if (h < 1) throw ConfigError("model.hidden", "widths must be >= 1");
  if (!(bn_eps > 0.0)) throw ConfigError("model.bn_eps", "must be > 0");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("model.bn_momentum", "must be in (0, 1]");
}

namespace {

Affine init_affine(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Affine a{Matrix(out, in), Matrix(1, out)};
  for (double& v : a.w.values()) v = rng.uniform(-bound, bound);
  for (double& v : a.b.values()) v = rng.uniform(-bound, bound);
  return a;
}

Standardizer init_standardizer(std::size_t d) {
  return Standardizer{Matrix(1, d, 1.0), Matrix(1, d, 0.0), Matrix(1, d, 0.0), Matrix(1, d, 1.0)};
}

}  // namespace

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  std::size_t in = config.d_x;
  for (std::size_t h : config.hidden) {
    p.feature_layers.push_back(init_affine(in, h, rng));
    in = h;
  }
  p.feature_layers.push_back(init_affine(in, config.d_v, rng));
  p.classifier = init_affine(config.d_v, config.num_classes, rng);
  p.encoder = init_affine(config.d_v, config.d_s, rng);
  p.decoder = init_affine(config.d_s, config.d_v, rng);
  if (config.use_batch_standardization) {
    p.encoder_norm = init_standardizer(config.d_s);
    p.decoder_norm = init_standardizer(config.d_v);
  }
  return p;
}

std::vector<Matrix> ModelParams::blocks() const {
  std::vector<Matrix> out;
  for (const Affine& a : feature_layers) {
    out.push_back(a.w);
    out.push_back(a.b);
  }
  out.push_back(classifier.w);
  out.push_back(classifier.b);
  out.push_back(encoder.w);
  out.push_back(encoder.b);
  if (encoder_norm) {
    out.push_back(encoder_norm->gamma);
    out.push_back(encoder_norm->beta);
  }
  out.push_back(decoder.w);
  out.push_back(decoder.b);
  if (decoder_norm) {
    out.push_back(decoder_norm->gamma);
    out.push_back(decoder_norm->beta);
  }
  return out;
}

std::vector<std::string> ModelParams::block_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < feature_layers.size(); ++i) {
    out.push_back("f" + std::to_string(i) + ".w");
    out.push_back("f" + std::to_string(i) + ".b");
  }
  out.insert(out.end(), {"h.w", "h.b", "e.w", "e.b"});
  if (encoder_norm) out.insert(out.end(), {"e.gamma", "e.beta"});
  out.insert(out.end(), {"dec.w", "dec.b"});
  if (decoder_norm) out.insert(out.end(), {"dec.gamma", "dec.beta"});
  return out;
}

void ModelParams::assign(std::span<const Matrix> b) {
  const std::size_t expected = 2 * feature_layers.size() + 6 + (encoder_norm ? 2 : 0) + (decoder_norm ? 2 : 0);
  if (b.size() != expected) throw InputError("ModelParams::assign: block count mismatch");
  std::size_t i = 0;
  auto take = [&](Matrix& dst) {
    if (!dst.same_shape(b[i])) throw InputError("ModelParams::assign: block shape mismatch");
    dst = b[i++];
  };
  for (Affine& a : feature_layers) {
    take(a.w);
    take(a.b);
  }
  take(classifier.w);
  take(classifier.b);
  take(encoder.w);
  take(encoder.b);
  if (encoder_norm) {
    take(encoder_norm->gamma);
    take(encoder_norm->beta);
  }
  take(decoder.w);
  take(decoder.b);
  if (decoder_norm) {
    take(decoder_norm->gamma);
    take(decoder_norm->beta);
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix& m : blocks()) n += m.size();
  return n;
}

ModelParams apply_step(const ModelParams& params, std::span<const Matrix> grads, double lr) {
  std::vector<Matrix> b = params.blocks();
  if (grads.size() != b.size()) throw InputError("apply_step: gradient block count mismatch");
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b[i].same_shape(grads[i])) throw InputError("apply_step: gradient shape mismatch");
    b[i].add_scaled(grads[i], -lr);
  }
  ModelParams out = params;
  out.assign(b);
  return out;
}

ModelParams apply_step(const ModelParams& params, const GradResult& grads, double lr) {
  return apply_step(params, grads.grads, lr);
}

std::uint64_t params_hash(const ModelParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const Matrix& m) {
    for (double v : m.values()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const Matrix& m : params.blocks()) feed(m);
  for (const auto* s : {&params.encoder_norm, &params.decoder_norm})
    if (*s) {
      feed((*s)->running_mean);
      feed((*s)->running_var);
    }
  return h;
}

Bound::Bound(const ModelParams& params, std::span<const ad::Var> leaves, Mode mode, MomentLog* log)
    : params_(&params), tape_(nullptr), mode_(mode), log_(log) {
  const std::size_t expected = params.blocks().size();
  if (leaves.size() != expected) throw ConstructionError("model::Bound: leaf count mismatch");
  tape_ = &leaves.front().tape();
  std::size_t i = 0;
  for (std::size_t l = 0; l < params.feature_layers.size(); ++l) {
    feature_.emplace_back(leaves[i], leaves[i + 1]);
    i += 2;
  }
  classifier_w_ = leaves[i++];
  classifier_b_ = leaves[i++];
  enc_w_ = leaves[i++];
  enc_b_ = leaves[i++];
  if (params.encoder_norm) {
    enc_gamma_ = leaves[i++];
    enc_beta_ = leaves[i++];
  }
  dec_w_ = leaves[i++];
  dec_b_ = leaves[i++];
  if (params.decoder_norm) {
    dec_gamma_ = leaves[i++];
    dec_beta_ = leaves[i++];
  }
}

Bound Bound::constant(ad::Tape& tape, const ModelParams& params, Mode mode) {
  std::vector<ad::Var> leaves;
  for (Matrix& m : params.blocks()) leaves.push_back(tape.constant(std::move(m)));
  return Bound(params, leaves, mode);
}

ad::Var Bound::features(ad::Var x) const {
  if (x.cols() != params_->config.d_x) throw InputError("forward_features: input width mismatch");
  ad::Var h = x;
  for (const auto& [w, b] : feature_) h = ad::relu(ad::affine(h, w, b));
  return h;
}

ad::Var Bound::logits(ad::Var z) const {
  if (z.cols() != params_->config.d_v) throw InputError("forward_logits: feature width mismatch");
  return ad::affine(z, classifier_w_, classifier_b_);
}

ad::Var Bound::standardize(ad::Var x, const Standardizer& s, ad::Var gamma, ad::Var beta,
                           std::vector<ad::BatchMoments>* sink) const {
  const double eps = params_->config.bn_eps;
  if (mode_ == Mode::eval) return ad::fixed_standardize(x, s.running_mean, s.running_var, gamma, beta, eps);
  ad::BatchMoments moments;
  ad::Var out = ad::batch_standardize(x, gamma, beta, eps, &moments);
  if (sink) sink->push_back(std::move(moments));
  return out;
}

ad::Var Bound::encode(ad::Var z) const {
  if (z.cols() != params_->config.d_v) throw InputError("encode: feature width mismatch");
  ad::Var h = ad::affine(z, enc_w_, enc_b_);
  if (params_->encoder_norm)
    h = standardize(h, *params_->encoder_norm, enc_gamma_, enc_beta_, log_ ? &log_->encoder : nullptr);
  return ad::normalize_rows(ad::relu(h));
}

ad::Var Bound::decode(ad::Var s) const {
  if (s.cols() != params_->config.d_s) throw InputError("decode: semantic width mismatch");
  ad::Var h = ad::affine(s, dec_w_, dec_b_);
  if (params_->decoder_norm)
    h = standardize(h, *params_->decoder_norm, dec_gamma_, dec_beta_, log_ ? &log_->decoder : nullptr);
  return ad::relu(h);
}

Matrix forward_features(const ModelParams& params, const Matrix& x) {
  ad::Tape t;
  return Bound::constant(t, params).features(t.constant(x)).value();
}

Matrix forward_logits(const ModelParams& params, const Matrix& z) {
  ad::Tape t;
  return Bound::constant(t, params).logits(t.constant(z)).value();
}

Matrix encode(const ModelParams& params, const Matrix& z) {
  ad::Tape t;
  return Bound::constant(t, params).encode(t.constant(z)).value();
}

Matrix decode(const ModelParams& params, const Matrix& s) {
  ad::Tape t;
  return Bound::constant(t, params).decode(t.constant(s)).value();
}

void update_running_stats(ModelParams& params, const MomentLog& log) {
  const double m = params.config.bn_momentum;
  auto fold = [m](Standardizer& s, const std::vector<ad::BatchMoments>& seen) {
    for (const auto& bm : seen) {
      s.running_mean *= (1.0 - m);
      s.running_mean.add_scaled(bm.mean, m);
      s.running_var *= (1.0 - m);
      s.running_var.add_scaled(bm.variance, m);
    }
  };
  if (params.encoder_norm) fold(*params.encoder_norm, log.encoder);
  if (params.decoder_norm) fold(*params.decoder_norm, log.decoder);
}

}  // namespace ltds::model
