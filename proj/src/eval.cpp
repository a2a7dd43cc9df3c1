#include "ltds/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "ltds/error.hpp"
#include "ltds/linalg.hpp"

namespace ltds::eval {

OpenDecision predict_open(std::span<const double> logits, const std::vector<bool>& known, double threshold,
                          Confidence mode) {
  if (known.size() != logits.size()) throw InputError("predict_open: known-class mask has wrong length");
  std::size_t best = kOpen;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (known[c] && (best == kOpen || logits[c] > logits[best])) best = c;
  if (best == kOpen) return {kOpen, 0.0};
  double confidence = logits[best];
  if (mode == Confidence::max_softmax) {
    double s = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c)
      if (known[c]) s += std::exp(logits[c] - logits[best]);
    confidence = 1.0 / s;
  }
  return {confidence < threshold ? kOpen : best, confidence};
}

OpenDecision predict_open(std::span<const double> logits, double threshold) {
  return predict_open(logits, std::vector<bool>(logits.size(), true), threshold);
}

double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

MetricReport score(const Matrix& logits, std::span<const std::size_t> labels, std::span<const std::size_t> domains,
                   const std::vector<bool>& known, std::size_t num_domains, std::size_t heldout_domain,
                   const EvalOptions& opts) {
  if (logits.rows() != labels.size() || labels.size() != domains.size())
    throw InputError("score: prediction/label count mismatch");
  const std::size_t C = logits.cols();
  MetricReport r;
  r.threshold = opts.threshold;
  r.heldout_domain = heldout_domain;
  r.num_samples = labels.size();
  std::vector<long> dom_hit(num_domains, 0), dom_n(num_domains, 0);
  std::vector<long> cls_hit(C, 0), cls_n(C, 0);
  long known_hit = 0, known_n = 0, open_hit = 0, open_n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = labels[i];
    const std::size_t d = domains[i];
    if (y >= C || d >= num_domains) throw InputError("score: label or domain out of range");
    const OpenDecision dec = predict_open(logits.row(i), known, opts.threshold, opts.confidence);
    const bool correct = known[y] ? dec.label == y : dec.open();
    ++cls_n[y];
    cls_hit[y] += correct;
    if (known[y]) {
      ++known_n;
      known_hit += correct;
      ++dom_n[d];
      dom_hit[d] += correct;
    } else {
      ++open_n;
      open_hit += correct;
    }
  }
  auto pct = [](long hit, long n) { return n > 0 ? 100.0 * static_cast<double>(hit) / static_cast<double>(n) : 0.0; };
  r.per_domain_acc.resize(num_domains);
  double sum = 0.0;
  long used = 0;
  for (std::size_t d = 0; d < num_domains; ++d) {
    r.per_domain_acc[d] = pct(dom_hit[d], dom_n[d]);
    if (dom_n[d] > 0) {
      sum += r.per_domain_acc[d];
      ++used;
    }
  }
  r.per_class_acc.resize(C);
  for (std::size_t c = 0; c < C; ++c) r.per_class_acc[c] = pct(cls_hit[c], cls_n[c]);
  r.acc_u = heldout_domain < num_domains ? r.per_domain_acc[heldout_domain] : 0.0;
  r.known_acc = pct(known_hit, known_n);
  r.acc = opts.pooled_acc ? r.known_acc : (used > 0 ? sum / static_cast<double>(used) : 0.0);
  r.open_acc = pct(open_hit, open_n);
  if (open_n == 0) {
    r.h_undefined = true;
    r.h = r.acc;
  } else {
    r.h = harmonic_mean(r.known_acc, r.open_acc);
  }
  return r;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 0; i < 20; ++i) g.push_back(i / 20.0);
  return g;
}

MetricReport evaluate(const model::ModelParams& params, const data::Dataset& ds, std::size_t heldout_domain,
                      const EvalOptions& opts) {
  if (heldout_domain >= ds.num_domains) throw InputError("evaluate: held-out domain out of range");
  const auto idx = ds.indices(data::Split::test);
  bool seen = false;
  for (std::size_t i : idx) seen = seen || ds.samples[i].domain == heldout_domain;
  if (!seen) throw InputError("evaluate: held-out domain has no test samples");
  const data::Batch b = data::gather(ds, idx);
  const Matrix logits = model::forward_logits(params, model::forward_features(params, b.x));
  EvalOptions o = opts;
  if (o.auto_threshold) o.threshold = select_threshold(params, ds, o.grid, o.confidence);
  return score(logits, b.labels, b.domains, ds.known_classes(heldout_domain), ds.num_domains, heldout_domain, o);
}

std::string to_json(const MetricReport& r, int indent) {
  nlohmann::json j;
  j["acc_u"] = r.acc_u;
  j["acc"] = r.acc;
  j["h"] = r.h;
  j["known_acc"] = r.known_acc;
  j["open_acc"] = r.open_acc;
  j["h_undefined"] = r.h_undefined;
  j["threshold"] = r.threshold;
  j["heldout_domain"] = r.heldout_domain;
  j["per_domain_acc"] = r.per_domain_acc;
  j["per_class_acc"] = r.per_class_acc;
  j["num_samples"] = r.num_samples;
  return j.dump(indent);
}

double select_threshold(const Matrix& logits, std::span<const std::size_t> labels, const std::vector<bool>& known,
                        std::span<const double> grid, Confidence mode) {
  if (grid.empty()) throw InputError("select_threshold: empty grid");
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  const std::vector<std::size_t> domains(labels.size(), 0);
  double best_t = sorted.front();
  double best_h = -1.0;
  for (double t : sorted) {
    if (!(t >= 0.0 && t <= 1.0) && mode == Confidence::max_softmax)
      throw InputError("select_threshold: grid values must lie in [0, 1]");
    EvalOptions o;
    o.threshold = t;
    o.confidence = mode;
    o.pooled_acc = true;
    const MetricReport r = score(logits, labels, domains, known, 1, 0, o);
    if (r.h > best_h) {
      best_h = r.h;
      best_t = t;
    }
  }
  return best_t;
}

double select_threshold(const model::ModelParams& params, const data::Dataset& ds, std::span<const double> grid,
                        Confidence mode) {
  const auto idx = ds.indices(data::Split::val);
  const data::Batch b = data::gather(ds, idx);
  const Matrix logits = model::forward_logits(params, model::forward_features(params, b.x));
  return select_threshold(logits, b.labels, ds.known_classes(), grid, mode);
}

double frechet_distance(std::span<const double> mu1, const Matrix& sigma1, std::span<const double> mu2,
                        const Matrix& sigma2) {
  const std::size_t d = mu1.size();
  if (mu2.size() != d || sigma1.rows() != d || sigma1.cols() != d || !sigma1.same_shape(sigma2))
    throw InputError("frechet_distance: shape mismatch");
  require_psd(sigma1, "frechet_distance");
  require_psd(sigma2, "frechet_distance");
  double mean_term = 0.0;
  for (std::size_t k = 0; k < d; ++k) mean_term += (mu1[k] - mu2[k]) * (mu1[k] - mu2[k]);
  const Matrix r = psd_sqrt(sigma1);
  Matrix m = matmul(matmul(r, sigma2), r);
  m = 0.5 * (m + m.transpose());
  const double t = trace(sigma1) + trace(sigma2) - 2.0 * trace(psd_sqrt(m));
  return std::max(0.0, mean_term + t);
}

Matrix covariance_distance_matrix(const banks::CovarianceBank& bank) {
  const std::size_t C = bank.num_classes();
  Matrix out(C, C);
  for (std::size_t i = 0; i < C; ++i) {
    out(i, i) = 1.0;
    for (std::size_t j = i + 1; j < C; ++j) {
      const double v = std::exp(-frobenius_norm(bank.covariance(i) - bank.covariance(j)));
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

Retrieval topk_retrieval(std::span<const double> query, const model::ModelParams& params, const data::Dataset& ds,
                         std::span<const std::size_t> gallery, std::size_t k, std::size_t query_index) {
  if (gallery.empty()) throw InputError("topk_retrieval: empty gallery");
  auto embed = [&](const Matrix& x) { return model::encode(params, model::forward_features(params, x)); };
  const Matrix q = embed(Matrix::row_vector(query));
  std::vector<std::size_t> idx;
  for (std::size_t i : gallery)
    if (i != query_index) idx.push_back(i);
  const Matrix g = embed(ds.features(idx));
  Retrieval out;
  for (std::size_t i = 0; i < idx.size(); ++i) out.hits.emplace_back(idx[i], dot(q.row(0), g.row(i)));
  std::sort(out.hits.begin(), out.hits.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (k > out.hits.size()) out.truncated = true;
  else out.hits.resize(k);
  return out;
}

void dump_features(const model::ModelParams& params, const data::Dataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t dv = params.config.d_v;
  out << "domain,label";
  for (std::size_t k = 0; k < dv; ++k) out << ",z_" << k;
  out << '\n';
  if (!ds.samples.empty()) {
    std::vector<std::size_t> all(ds.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Matrix z = model::forward_features(params, ds.features(all));
    for (std::size_t i = 0; i < all.size(); ++i) {
      out << ds.samples[i].domain << ',' << ds.samples[i].label;
      for (double v : z.row(i)) out << ',' << data::format_double(v);
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

FeatureDump load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty file");
  const std::size_t width = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  std::vector<double> vals;
  FeatureDump out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const std::size_t p = line.find(',', start);
      cols.push_back(line.substr(start, p == std::string::npos ? std::string::npos : p - start));
      if (p == std::string::npos) break;
      start = p + 1;
    }
    if (cols.size() != width + 2) throw ParseError(path.string(), lineno, "wrong field count");
    try {
      out.domains.push_back(static_cast<std::size_t>(std::stoull(cols[0])));
      out.labels.push_back(static_cast<std::size_t>(std::stoull(cols[1])));
      for (std::size_t k = 0; k < width; ++k) vals.push_back(data::parse_double(cols[k + 2]));
    } catch (const std::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  out.z = Matrix(out.labels.size(), width, std::move(vals));
  return out;
}

}  // namespace ltds::eval
