#include "ltds/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ltds/error.hpp"
#include "ltds/linalg.hpp"

namespace ltds::losses {

// ---------------------------------------------------------------------------
// DomainClassCounts

DomainClassCounts::DomainClassCounts(std::size_t num_domains, std::size_t num_classes)
    : domains_(num_domains), classes_(num_classes), counts_(num_domains * num_classes, 0) {}

DomainClassCounts::DomainClassCounts(std::size_t num_domains, std::size_t num_classes, std::vector<long> counts)
    : domains_(num_domains), classes_(num_classes), counts_(std::move(counts)) {
  if (counts_.size() != domains_ * classes_) throw InputError("DomainClassCounts: size mismatch");
  for (long c : counts_)
    if (c < 0) throw InputError("DomainClassCounts: negative count");
}

long DomainClassCounts::at(std::size_t domain, std::size_t cls) const {
  if (domain >= domains_ || cls >= classes_) throw InputError("DomainClassCounts: index out of range");
  return counts_[domain * classes_ + cls];
}

long& DomainClassCounts::at(std::size_t domain, std::size_t cls) {
  if (domain >= domains_ || cls >= classes_) throw InputError("DomainClassCounts: index out of range");
  return counts_[domain * classes_ + cls];
}

std::span<const long> DomainClassCounts::row(std::size_t domain) const {
  if (domain >= domains_) throw InputError("DomainClassCounts: domain out of range");
  return {counts_.data() + domain * classes_, classes_};
}

std::vector<double> DomainClassCounts::weights(std::size_t domain) const {
  auto r = row(domain);
  return std::vector<double>(r.begin(), r.end());
}

long DomainClassCounts::domain_total(std::size_t domain) const {
  auto r = row(domain);
  return std::accumulate(r.begin(), r.end(), 0L);
}

long DomainClassCounts::class_total(std::size_t cls) const {
  long t = 0;
  for (std::size_t d = 0; d < domains_; ++d) t += at(d, cls);
  return t;
}

void ContrastiveParams::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau", "temperature must be > 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha", "margin must be >= 0");
}

void AugParams::validate(std::size_t num_classes) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be >= 0");
  if (k < 1 || k > num_classes) throw ConfigError("k", "must satisfy 1 <= k <= C");
}

namespace {

/// Cross-entropy of target y over adjusted logits, evaluated relative to the target
/// logit so that near-zero losses keep full relative precision.
struct TargetSoftmax {
  double loss = 0.0;
  std::vector<double> probs;
};

TargetSoftmax target_softmax(std::span<const double> a, std::size_t y, const std::vector<bool>* include = nullptr) {
  const auto in = [&](std::size_t j) { return include == nullptr || (*include)[j]; };
  double m = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j)
    if (in(j)) m = std::max(m, a[j] - a[y]);
  double loss;
  if (m == 0.0) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
      if (j != y && in(j)) s += std::exp(a[j] - a[y]);
    loss = std::log1p(s);
  } else {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
      if (in(j)) s += std::exp(a[j] - a[y] - m);
    loss = m + std::log(s);
  }
  TargetSoftmax out{loss, std::vector<double>(a.size(), 0.0)};
  for (std::size_t j = 0; j < a.size(); ++j)
    if (in(j)) out.probs[j] = std::exp(a[j] - a[y] - loss);
  return out;
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InputError(std::string(what) + ": non-finite input");
}

void require_unit_rows(const Matrix& m, const char* what) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (std::abs(norm2(m.row(r)) - 1.0) > 1e-6)
      throw InputError(std::string(what) + ": row " + std::to_string(r) + " is not unit-normalized");
}

}  // namespace

// ---------------------------------------------------------------------------
// Classification kernels

VectorGrad dc_loss_grad(std::span<const double> logits, std::size_t label, std::span<const double> weights) {
  require_finite(logits, "dc_loss");
  if (weights.size() != logits.size()) throw InputError("dc_loss: count row length mismatch");
  if (label >= logits.size()) throw InputError("dc_loss: label out of range");
  if (!(weights[label] > 0.0))
    throw InputError("dc_loss: label " + std::to_string(label) + " has zero count in its domain");
  std::vector<double> a(logits.size(), 0.0);
  std::vector<bool> include(logits.size(), false);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (weights[c] > 0.0) {
      include[c] = true;
      a[c] = logits[c] + std::log(weights[c]);
    }
  }
  TargetSoftmax ts = target_softmax(a, label, &include);
  ts.probs[label] -= 1.0;
  return {ts.loss, std::move(ts.probs)};
}

double dc_loss(std::span<const double> logits, std::size_t label, std::size_t domain,
               const DomainClassCounts& counts) {
  if (logits.size() != counts.num_classes()) throw InputError("dc_loss: logits length does not match class count");
  return dc_loss_grad(logits, label, counts.weights(domain)).value;
}

VectorGrad cross_entropy_grad(std::span<const double> logits, std::size_t label) {
  require_finite(logits, "cross_entropy");
  if (label >= logits.size()) throw InputError("cross_entropy: label out of range");
  TargetSoftmax ts = target_softmax(logits, label);
  ts.probs[label] -= 1.0;
  return {ts.loss, std::move(ts.probs)};
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  return cross_entropy_grad(logits, label).value;
}

// ---------------------------------------------------------------------------
// Visual-semantic alignment

Z2SGrad z2s_kernel(std::span<const double> embedding, std::size_t label, const Matrix& table,
                   const ContrastiveParams& cp) {
  const std::size_t C = table.rows();
  if (embedding.size() != table.cols()) throw InputError("z2s_loss: embedding width mismatch");
  if (label >= C) throw InputError("z2s_loss: label out of range");
  std::vector<double> a(C);
  for (std::size_t j = 0; j < C; ++j) a[j] = dot(embedding, table.row(j)) / cp.tau;
  a[label] -= cp.alpha / cp.tau;
  TargetSoftmax ts = target_softmax(a, label);
  ts.probs[label] -= 1.0;
  Z2SGrad out{ts.loss, std::vector<double>(embedding.size(), 0.0), Matrix(C, table.cols())};
  for (std::size_t j = 0; j < C; ++j) {
    const double g = ts.probs[j] / cp.tau;
    if (g == 0.0) continue;
    auto srow = table.row(j);
    auto drow = out.d_table.row(j);
    for (std::size_t k = 0; k < embedding.size(); ++k) {
      out.d_embedding[k] += g * srow[k];
      drow[k] = g * embedding[k];
    }
  }
  return out;
}

double z2s_loss(std::span<const double> embedding, std::size_t label, const SemanticTable& table,
                const ContrastiveParams& cp) {
  cp.validate();
  require_finite(embedding, "z2s_loss");
  if (std::abs(norm2(embedding) - 1.0) > 1e-6) throw InputError("z2s_loss: embedding is not unit-normalized");
  require_unit_rows(table.matrix(), "z2s_loss table");
  return z2s_kernel(embedding, label, table.matrix(), cp).value;
}

S2SGrad s2s_kernel(const Matrix& s_m, const Matrix& s_n, const ContrastiveParams& cp) {
  if (!s_m.same_shape(s_n)) throw InputError("s2s_loss: table shape mismatch");
  const std::size_t C = s_m.rows();
  const std::size_t d = s_m.cols();
  if (C == 0) throw InputError("s2s_loss: empty tables");
  S2SGrad out{0.0, Matrix(C, d), Matrix(C, d)};
  const double inv_tau = 1.0 / cp.tau;
  const double inv_c = 1.0 / static_cast<double>(C);
  // Entry 0 is the positive pair; 1..C are ⟨m_c, n_j⟩; C+1..2C are ⟨m_c, m_j⟩ (j ≠ c skipped).
  std::vector<double> a(2 * C + 1);
  std::vector<bool> include(2 * C + 1, true);
  for (std::size_t c = 0; c < C; ++c) {
    auto mc = s_m.row(c);
    a[0] = (dot(mc, s_n.row(c)) - cp.alpha) * inv_tau;
    for (std::size_t j = 0; j < C; ++j) {
      a[1 + j] = dot(mc, s_n.row(j)) * inv_tau;
      a[1 + C + j] = dot(mc, s_m.row(j)) * inv_tau;
    }
    include[1 + c] = false;
    include[1 + C + c] = false;
    TargetSoftmax ts = target_softmax(a, 0, &include);
    include[1 + c] = true;
    include[1 + C + c] = true;
    out.value += ts.loss * inv_c;

    const double g_pos = (ts.probs[0] - 1.0) * inv_tau * inv_c;
    auto dmc = out.d_m.row(c);
    {
      auto nc = s_n.row(c);
      auto dnc = out.d_n.row(c);
      for (std::size_t k = 0; k < d; ++k) {
        dmc[k] += g_pos * nc[k];
        dnc[k] += g_pos * mc[k];
      }
    }
    for (std::size_t j = 0; j < C; ++j) {
      if (j == c) continue;
      const double gn = ts.probs[1 + j] * inv_tau * inv_c;
      const double gm = ts.probs[1 + C + j] * inv_tau * inv_c;
      auto nj = s_n.row(j);
      auto mj = s_m.row(j);
      auto dnj = out.d_n.row(j);
      auto dmj = out.d_m.row(j);
      for (std::size_t k = 0; k < d; ++k) {
        dmc[k] += gn * nj[k] + gm * mj[k];
        dnj[k] += gn * mc[k];
        dmj[k] += gm * mc[k];
      }
    }
  }
  return out;
}

double s2s_loss(const Matrix& s_m, const Matrix& s_n, const ContrastiveParams& cp) {
  cp.validate();
  if (!s_m.all_finite() || !s_n.all_finite()) throw InputError("s2s_loss: non-finite input");
  return s2s_kernel(s_m, s_n, cp).value;
}

double s2z_loss(const Matrix& v_hat, const model::ModelParams& params, const SemanticTable& table,
                const ContrastiveParams& cp) {
  cp.validate();
  if (!v_hat.all_finite()) throw InputError("s2z_loss: non-finite reconstructed prototypes");
  if (v_hat.rows() != table.num_classes() || v_hat.cols() != params.config.d_v ||
      params.config.num_classes != table.num_classes() || params.config.d_s != table.dim())
    throw InputError("s2z_loss: shape mismatch");
  ad::Tape tape;
  auto bound = model::Bound::constant(tape, params);
  return s2z_loss(bound, tape.constant(v_hat), tape.constant(table.matrix()), cp).scalar();
}

// ---------------------------------------------------------------------------
// Semantic-similarity guided augmentation

AugGrad aug_kernel(std::span<const double> feature, std::size_t label, const Matrix& w, const Matrix& b,
                   const Matrix& sigma_prime, double lambda, AugDenominator variant) {
  const std::size_t C = w.rows();
  const std::size_t d = w.cols();
  if (feature.size() != d || b.size() != C || sigma_prime.rows() != d || sigma_prime.cols() != d)
    throw InputError("aug_loss: shape mismatch");
  if (label >= C) throw InputError("aug_loss: label out of range");

  auto wy = w.row(label);
  // Σ'·Δw_c for every class; reused for the gradient.
  Matrix sigma_dw(C, d);
  std::vector<double> quad(C, 0.0);
  std::vector<double> dw(d);
  if (lambda != 0.0) {
    for (std::size_t c = 0; c < C; ++c) {
      if (c == label) continue;
      auto wc = w.row(c);
      for (std::size_t k = 0; k < d; ++k) dw[k] = wc[k] - wy[k];
      auto sd = sigma_dw.row(c);
      for (std::size_t r = 0; r < d; ++r) sd[r] = dot(sigma_prime.row(r), dw);
      quad[c] = dot(dw, sd);
    }
  }
  // Under the printed denominator every class shares the target term, which softmax drops.
  std::vector<double> a(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double base = variant == AugDenominator::derivation ? dot(w.row(c), feature) + b[c] : 0.0;
    a[c] = base + 0.5 * lambda * quad[c];
  }
  TargetSoftmax ts = target_softmax(a, label);
  std::vector<double>& g = ts.probs;
  g[label] -= 1.0;

  AugGrad out{ts.loss, std::vector<double>(d, 0.0), Matrix(C, d), Matrix(1, C)};
  if (variant == AugDenominator::derivation) {
    for (std::size_t c = 0; c < C; ++c) {
      out.d_b[c] = g[c];
      auto wc = w.row(c);
      auto dwc = out.d_w.row(c);
      for (std::size_t k = 0; k < d; ++k) {
        out.d_feature[k] += g[c] * wc[k];
        dwc[k] += g[c] * feature[k];
      }
    }
  }
  // The feature and bias terms cancel under the printed denominator (Σ_c g_c = 0).
  if (lambda != 0.0) {
    auto dwy = out.d_w.row(label);
    for (std::size_t c = 0; c < C; ++c) {
      if (c == label || g[c] == 0.0) continue;
      auto sd = sigma_dw.row(c);
      auto dwc = out.d_w.row(c);
      for (std::size_t k = 0; k < d; ++k) {
        dwc[k] += g[c] * lambda * sd[k];
        dwy[k] -= g[c] * lambda * sd[k];
      }
    }
  }
  return out;
}

double aug_loss(std::span<const double> feature, std::size_t label, const Matrix& w, const Matrix& b,
                const Matrix& sigma_prime, const AugParams& ap) {
  if (!(ap.lambda >= 0.0)) throw InputError("aug_loss: lambda must be >= 0");
  require_finite(feature, "aug_loss");
  try {
    require_psd(sigma_prime, "aug_loss");
  } catch (const DomainError& e) {
    throw InputError(e.what());
  }
  return aug_kernel(feature, label, w, b, sigma_prime, ap.lambda, ap.variant).value;
}

double aug_bound(std::span<const double> mu_y, const Matrix& sigma_y, const Matrix& w, const Matrix& b,
                 std::size_t label, double lambda) {
  const std::size_t C = w.rows();
  const std::size_t d = w.cols();
  if (mu_y.size() != d || b.size() != C || sigma_y.rows() != d || sigma_y.cols() != d)
    throw InputError("aug_bound: shape mismatch");
  if (label >= C) throw InputError("aug_bound: label out of range");
  if (!(lambda >= 0.0)) throw InputError("aug_bound: lambda must be >= 0");
  try {
    require_psd(sigma_y, "aug_bound");
  } catch (const DomainError& e) {
    throw InputError(e.what());
  }
  auto wy = w.row(label);
  std::vector<double> terms(C);
  std::vector<double> dw(d), sd(d);
  for (std::size_t c = 0; c < C; ++c) {
    auto wc = w.row(c);
    for (std::size_t k = 0; k < d; ++k) dw[k] = wc[k] - wy[k];
    for (std::size_t r = 0; r < d; ++r) sd[r] = dot(sigma_y.row(r), dw);
    terms[c] = dot(dw, mu_y) + (b[c] - b[label]) + 0.5 * lambda * dot(dw, sd);
  }
  return logsumexp(terms);
}

// ---------------------------------------------------------------------------
// Tape operations

ad::Var dc_loss_mean(ad::Var logits, std::span<const std::size_t> labels,
                     std::span<const std::size_t> domains, const DomainClassCounts& counts) {
  const Matrix& z = logits.value();
  const std::size_t n = z.rows();
  if (n == 0) throw InputError("dc_loss: empty batch");
  if (labels.size() != n || domains.size() != n) throw InputError("dc_loss: label/domain count mismatch");
  if (z.cols() != counts.num_classes()) throw InputError("dc_loss: logits width does not match class count");
  Matrix g(n, z.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    VectorGrad r = dc_loss_grad(z.row(i), labels[i], counts.weights(domains[i]));
    total += r.value;
    g.set_row(i, r.grad);
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::scalar_kernel(total * inv, {{logits, g * inv}});
}

ad::Var ce_loss_mean(ad::Var logits, std::span<const std::size_t> labels) {
  const Matrix& z = logits.value();
  const std::size_t n = z.rows();
  if (n == 0) throw InputError("cross_entropy: empty batch");
  if (labels.size() != n) throw InputError("cross_entropy: label count mismatch");
  Matrix g(n, z.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    VectorGrad r = cross_entropy_grad(z.row(i), labels[i]);
    total += r.value;
    g.set_row(i, r.grad);
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::scalar_kernel(total * inv, {{logits, g * inv}});
}

ad::Var z2s_loss_mean(ad::Var embeddings, std::span<const std::size_t> labels, ad::Var table,
                      const ContrastiveParams& cp) {
  cp.validate();
  const Matrix& e = embeddings.value();
  const Matrix& s = table.value();
  const std::size_t n = e.rows();
  if (n == 0) throw InputError("z2s_loss: empty batch");
  if (labels.size() != n) throw InputError("z2s_loss: label count mismatch");
  if (!e.all_finite() || !s.all_finite()) throw InputError("z2s_loss: non-finite input");
  Matrix ge(n, e.cols());
  Matrix gs(s.rows(), s.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Z2SGrad r = z2s_kernel(e.row(i), labels[i], s, cp);
    total += r.value;
    ge.set_row(i, r.d_embedding);
    gs += r.d_table;
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::scalar_kernel(total * inv, {{embeddings, ge * inv}, {table, gs * inv}});
}

ad::Var s2s_loss(ad::Var s_m, ad::Var s_n, const ContrastiveParams& cp) {
  cp.validate();
  S2SGrad r = s2s_kernel(s_m.value(), s_n.value(), cp);
  if (s_m.id() == s_n.id() && &s_m.tape() == &s_n.tape())
    return ad::scalar_kernel(r.value, {{s_m, r.d_m + r.d_n}});
  return ad::scalar_kernel(r.value, {{s_m, std::move(r.d_m)}, {s_n, std::move(r.d_n)}});
}

ad::Var s2z_loss(const model::Bound& model, ad::Var v_hat, ad::Var table, const ContrastiveParams& cp) {
  const std::size_t C = v_hat.rows();
  if (table.rows() != C) throw InputError("s2z_loss: prototype count does not match table");
  std::vector<std::size_t> labels(C);
  std::iota(labels.begin(), labels.end(), std::size_t{0});
  ad::Var cls = ce_loss_mean(model.logits(v_hat), labels);
  ad::Var cyc = s2s_loss(model.encode(v_hat), table, cp);
  return ad::add(cls, cyc);
}

ad::Var aug_loss_mean(ad::Var features, std::span<const std::size_t> labels, ad::Var w, ad::Var b,
                      std::span<const Matrix> sigma_prime, double lambda, AugDenominator variant) {
  const Matrix& f = features.value();
  const Matrix& wv = w.value();
  const Matrix& bv = b.value();
  const std::size_t n = f.rows();
  if (n == 0) throw InputError("aug_loss: empty batch");
  if (labels.size() != n) throw InputError("aug_loss: label count mismatch");
  if (sigma_prime.size() != wv.rows()) throw InputError("aug_loss: need one blended covariance per class");
  Matrix gf(n, f.cols()), gw(wv.rows(), wv.cols()), gb(1, wv.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= wv.rows()) throw InputError("aug_loss: label out of range");
    AugGrad r = aug_kernel(f.row(i), labels[i], wv, bv, sigma_prime[labels[i]], lambda, variant);
    total += r.value;
    gf.set_row(i, r.d_feature);
    gw += r.d_w;
    gb += r.d_b;
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::scalar_kernel(total * inv, {{features, gf * inv}, {w, gw * inv}, {b, gb * inv}});
}

}  // namespace ltds::losses
