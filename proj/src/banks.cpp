#include "ltds/banks.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "ltds/error.hpp"

namespace ltds::banks {

PrototypeBank::PrototypeBank(std::size_t num_domains, std::size_t num_classes, std::size_t dim, double ema)
    : classes_(num_classes), dim_(dim), ema_(ema), v_(num_domains, Matrix(num_classes, dim)),
      mask_(num_domains * num_classes, 0) {
  if (!(ema > 0.0 && ema <= 1.0)) throw ConfigError("prototype_ema", "must be in (0, 1]");
}

PrototypeBank PrototypeBank::from_counts(const losses::DomainClassCounts& counts, std::size_t dim, double ema) {
  PrototypeBank bank(counts.num_domains(), counts.num_classes(), dim, ema);
  for (std::size_t d = 0; d < counts.num_domains(); ++d)
    for (std::size_t c = 0; c < counts.num_classes(); ++c) bank.set_mask(d, c, counts.present(d, c));
  return bank;
}

PrototypeBank PrototypeBank::single(const losses::DomainClassCounts& counts, std::span<const std::size_t> domains,
                                    std::size_t dim, double ema) {
  PrototypeBank bank(1, counts.num_classes(), dim, ema);
  for (std::size_t d : domains)
    for (std::size_t c = 0; c < counts.num_classes(); ++c)
      if (counts.present(d, c)) bank.set_mask(0, c, true);
  return bank;
}

void PrototypeBank::check(std::size_t domain, std::size_t cls) const {
  if (domain >= v_.size()) throw InputError("PrototypeBank: domain " + std::to_string(domain) + " out of range");
  if (cls >= classes_) throw InputError("PrototypeBank: class " + std::to_string(cls) + " out of range");
}

bool PrototypeBank::mask(std::size_t domain, std::size_t cls) const {
  check(domain, cls);
  return mask_[domain * classes_ + cls] != 0;
}

void PrototypeBank::set_mask(std::size_t domain, std::size_t cls, bool present) {
  check(domain, cls);
  mask_[domain * classes_ + cls] = present ? 1 : 0;
  if (!present) std::fill(v_[domain].row(cls).begin(), v_[domain].row(cls).end(), 0.0);
}

std::vector<std::size_t> PrototypeBank::present(std::size_t domain) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes_; ++c)
    if (mask(domain, c)) out.push_back(c);
  return out;
}

const Matrix& PrototypeBank::prototypes(std::size_t domain) const {
  check(domain, 0);
  return v_[domain];
}

Matrix& PrototypeBank::prototypes(std::size_t domain) {
  check(domain, 0);
  return v_[domain];
}

void update_prototypes(PrototypeBank& bank, std::size_t domain, const Matrix& features,
                       std::span<const std::size_t> labels) {
  if (features.rows() != labels.size()) throw InputError("update_prototypes: label count mismatch");
  if (features.cols() != bank.dim()) throw InputError("update_prototypes: feature width mismatch");
  const std::size_t C = bank.num_classes();
  for (std::size_t y : labels)
    if (!bank.mask(domain, y))
      throw InputError("update_prototypes: class " + std::to_string(y) + " is unseen in domain " +
                       std::to_string(domain));
  Matrix sums(C, bank.dim());
  std::vector<std::size_t> n(C, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto dst = sums.row(labels[i]);
    auto src = features.row(i);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    ++n[labels[i]];
  }
  Matrix& v = bank.prototypes(domain);
  const double a = bank.ema();
  for (std::size_t c = 0; c < C; ++c) {
    if (n[c] == 0) continue;
    auto row = v.row(c);
    auto s = sums.row(c);
    for (std::size_t k = 0; k < row.size(); ++k)
      row[k] = a * (s[k] / static_cast<double>(n[c])) + (1.0 - a) * row[k];
  }
}

ad::Var complete_semantic(const model::Bound& model, const PrototypeBank& bank, ad::Var table, std::size_t domain) {
  if (table.rows() != bank.num_classes()) throw InputError("complete_semantic: table has wrong class count");
  std::vector<std::size_t> idx = bank.present(domain);
  if (idx.empty()) return table;
  ad::Tape& tape = model.tape();
  Matrix v(idx.size(), bank.dim());
  for (std::size_t i = 0; i < idx.size(); ++i) v.set_row(i, bank.prototypes(domain).row(idx[i]));
  ad::Var encoded = model.encode(tape.constant(std::move(v)));
  return ad::overlay_rows(table, encoded, idx);
}

Matrix complete_semantic(const PrototypeBank& bank, const model::ModelParams& params, const SemanticTable& table,
                         std::size_t domain) {
  ad::Tape tape;
  auto bound = model::Bound::constant(tape, params);
  return complete_semantic(bound, bank, tape.constant(table.matrix()), domain).value();
}

Matrix decode_prototypes(const Matrix& s_hat, const model::ModelParams& params) {
  if (!s_hat.all_finite()) throw InputError("decode_prototypes: non-finite input");
  return model::decode(params, s_hat);
}

// ---------------------------------------------------------------------------

CovarianceBank::CovarianceBank(std::size_t num_classes, std::size_t dim)
    : dim_(dim), mu_(num_classes, dim), sigma_(num_classes, Matrix(dim, dim)), n_(num_classes, 0) {}

void CovarianceBank::set(std::size_t cls, std::span<const double> mean, const Matrix& sigma, long count) {
  if (cls >= n_.size()) throw InputError("CovarianceBank::set: class out of range");
  if (mean.size() != dim_ || sigma.rows() != dim_ || sigma.cols() != dim_)
    throw InputError("CovarianceBank::set: shape mismatch");
  if (count < 0) throw InputError("CovarianceBank::set: negative count");
  mu_.set_row(cls, mean);
  sigma_[cls] = sigma;
  n_[cls] = count;
}

void update_covariance(CovarianceBank& bank, const Matrix& features, std::span<const std::size_t> labels) {
  if (features.rows() != labels.size()) throw InputError("update_covariance: label count mismatch");
  if (features.cols() != bank.dim()) throw InputError("update_covariance: feature width mismatch");
  if (!features.all_finite()) throw InputError("update_covariance: non-finite features");
  const std::size_t C = bank.num_classes();
  const std::size_t d = bank.dim();
  std::vector<std::vector<std::size_t>> members(C);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= C) throw InputError("update_covariance: label out of range");
    members[labels[i]].push_back(i);
  }
  std::vector<double> mb(d), delta(d);
  for (std::size_t c = 0; c < C; ++c) {
    if (members[c].empty()) continue;
    const double m = static_cast<double>(members[c].size());
    std::fill(mb.begin(), mb.end(), 0.0);
    for (std::size_t i : members[c]) {
      auto x = features.row(i);
      for (std::size_t k = 0; k < d; ++k) mb[k] += x[k];
    }
    for (double& v : mb) v /= m;
    Matrix sb(d, d);
    for (std::size_t i : members[c]) {
      auto x = features.row(i);
      for (std::size_t r = 0; r < d; ++r) {
        const double xr = x[r] - mb[r];
        auto srow = sb.row(r);
        for (std::size_t k = 0; k < d; ++k) srow[k] += xr * (x[k] - mb[k]);
      }
    }
    sb *= 1.0 / m;

    const double n = static_cast<double>(bank.n_[c]);
    const double tot = n + m;
    auto mu = bank.mu_.row(c);
    for (std::size_t k = 0; k < d; ++k) delta[k] = mu[k] - mb[k];
    Matrix& s = bank.sigma_[c];
    for (std::size_t r = 0; r < d; ++r) {
      auto srow = s.row(r);
      auto brow = sb.row(r);
      for (std::size_t k = 0; k < d; ++k)
        srow[k] = (n * srow[k] + m * brow[k]) / tot + n * m * delta[r] * delta[k] / (tot * tot);
    }
    for (std::size_t k = 0; k < d; ++k) mu[k] = (n * mu[k] + m * mb[k]) / tot;
    bank.n_[c] += static_cast<long>(members[c].size());
  }
}

std::vector<std::size_t> topk_classes(const SemanticTable& table, std::size_t cls, std::size_t k) {
  const std::size_t C = table.num_classes();
  if (cls >= C) throw InputError("topk_classes: class out of range");
  if (k < 1 || k > C) throw ConfigError("k", "must satisfy 1 <= k <= C");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < C; ++i)
    if (i != cls) order.push_back(i);
  std::vector<double> sim(C);
  for (std::size_t i = 0; i < C; ++i) sim[i] = table.similarity(cls, i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  std::vector<std::size_t> out{cls};
  out.insert(out.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1));
  return out;
}

BlendResult blend_covariance(const CovarianceBank& bank, const SemanticTable& table, std::size_t k, bool weighted) {
  const std::size_t C = bank.num_classes();
  if (table.num_classes() != C) throw InputError("blend_covariance: table has wrong class count");
  BlendResult out;
  out.sigma.assign(C, Matrix(bank.dim(), bank.dim()));
  for (std::size_t c = 0; c < C; ++c) {
    double total = 0.0;
    for (std::size_t i : topk_classes(table, c, k)) {
      const long n = bank.count(i);
      if (n <= 0) continue;
      const double w = weighted ? static_cast<double>(n) : 1.0;
      out.sigma[c].add_scaled(bank.covariance(i), w);
      total += w;
    }
    if (total == 0.0) {
      out.empty_classes.push_back(c);
      continue;
    }
    out.sigma[c] *= 1.0 / total;
  }
  return out;
}

}  // namespace ltds::banks
