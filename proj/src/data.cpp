#include "ltds/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ltds/error.hpp"
#include "ltds/linalg.hpp"

namespace ltds::data {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Dataset

std::vector<std::size_t> Dataset::train_domains() const {
  std::vector<std::size_t> out;
  for (std::size_t d = 0; d < counts.num_domains(); ++d)
    if (counts.domain_total(d) > 0) out.push_back(d);
  return out;
}

std::vector<bool> Dataset::known_classes(std::size_t excluded) const {
  std::vector<bool> known(num_classes, false);
  for (std::size_t d = 0; d < counts.num_domains(); ++d) {
    if (d == excluded) continue;
    for (std::size_t c = 0; c < num_classes; ++c)
      if (counts.present(d, c)) known[c] = true;
  }
  return known;
}

std::vector<std::size_t> Dataset::indices(std::size_t domain, Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].domain == domain && samples[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

Matrix Dataset::features(std::span<const std::size_t> idx) const {
  Matrix x(idx.size(), d_x);
  for (std::size_t i = 0; i < idx.size(); ++i) x.set_row(i, samples.at(idx[i]).x);
  return x;
}

void Dataset::recount() {
  counts = losses::DomainClassCounts(num_domains, num_classes);
  for (const Sample& s : samples)
    if (s.split == Split::train) ++counts.at(s.domain, s.label);
}

void Dataset::validate() const {
  if (semantic.num_classes() != num_classes) throw InputError("dataset: semantic table has wrong class count");
  if (counts.num_domains() != num_domains || counts.num_classes() != num_classes)
    throw InputError("dataset: counts table has wrong shape");
  losses::DomainClassCounts recomputed(num_domains, num_classes);
  std::vector<long> test(num_domains * num_classes, 0);
  for (const Sample& s : samples) {
    if (s.x.size() != d_x) throw InputError("dataset: sample width mismatch");
    if (s.label >= num_classes || s.domain >= num_domains) throw InputError("dataset: label or domain out of range");
    if (s.split == Split::train) ++recomputed.at(s.domain, s.label);
    if (s.split == Split::test) ++test[s.domain * num_classes + s.label];
  }
  if (!(recomputed == counts)) throw InputError("dataset: counts do not match the train split");
  const std::vector<bool> known = known_classes();
  for (const Sample& s : samples)
    if (s.split == Split::val && known[s.label] && !counts.present(s.domain, s.label))
      throw InputError("dataset: validation sample of class " + std::to_string(s.label) + " in domain " +
                       std::to_string(s.domain) + " which has no training samples of it");
  if (!test.empty() && std::any_of(test.begin(), test.end(), [&](long n) { return n != test.front(); }))
    throw InputError("dataset: test split is not class-balanced across domains");
}

// ---------------------------------------------------------------------------
// Generator

double SyntheticConfig::effective_curve_scale() const {
  return curve_scale > 0.0 ? curve_scale : std::sqrt(static_cast<double>(num_classes - 1));
}

std::vector<std::size_t> SyntheticConfig::budget() const {
  if (!tail_domain_budget.empty()) return tail_domain_budget;
  std::vector<std::size_t> b(num_classes);
  const std::size_t head = (num_classes + 2) / 3;
  const std::size_t mid = (2 * num_classes + 2) / 3;
  for (std::size_t c = 0; c < num_classes; ++c)
    b[c] = c < head ? train_domains : (c < mid ? std::min<std::size_t>(2, train_domains) : 1);
  return b;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes", "must be >= 2");
  if (train_domains < 1) throw ConfigError("data.train_domains", "must be >= 1");
  if (d_x < 1) throw ConfigError("data.d_x", "must be >= 1");
  if (d_s < 1) throw ConfigError("data.d_s", "must be >= 1");
  if (n_min < 1 || n_max < n_min) throw ConfigError("data.n_max", "need n_max >= n_min >= 1");
  if (curve_scale < 0.0) throw ConfigError("data.curve_scale", "must be > 0 (or 0 for the default)");
  if (num_classes == 1 && curve_scale == 0.0) throw ConfigError("data.curve_scale", "undefined for one class");
  if (groups < 1) throw ConfigError("data.groups", "must be >= 1");
  for (auto [v, name] : {std::pair{anchor_spread, "data.anchor_spread"}, {group_spread, "data.group_spread"},
                         {noise_scale, "data.noise_scale"}, {anisotropy, "data.anisotropy"},
                         {semantic_noise, "data.semantic_noise"}, {transform_strength, "data.transform_strength"},
                         {shift_scale, "data.shift_scale"}})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be finite and >= 0");
  if (open_classes >= num_classes) throw ConfigError("data.open_classes", "must leave at least one known class");
  if (test_per_class < 1) throw ConfigError("data.test_per_class", "must be >= 1");
  if (!tail_domain_budget.empty() && tail_domain_budget.size() != num_classes)
    throw ConfigError("data.tail_domain_budget", "needs one entry per class rank");
  const auto b = budget();
  for (std::size_t c = 0; c + open_classes < num_classes; ++c) {
    if (b[c] < 1)
      throw ConfigError("data.tail_domain_budget", "rank " + std::to_string(c + 1) + " is assigned 0 domains");
    if (b[c] > train_domains)
      throw ConfigError("data.tail_domain_budget",
                        "rank " + std::to_string(c + 1) + " needs more domains than exist");
  }
  if (b.front() != train_domains)
    throw ConfigError("data.tail_domain_budget", "the head class must be present in every domain");
}

long longtail_counts(std::size_t c, long n_max, long n_min, std::size_t num_classes, double curve_scale) {
  if (c < 1 || c > num_classes) throw InputError("longtail_counts: rank out of range");
  if (n_min < 1 || n_max < n_min) throw InputError("longtail_counts: need n_max >= n_min >= 1");
  if (!(curve_scale > 0.0)) throw InputError("longtail_counts: curve_scale must be > 0");
  const double e = std::sqrt(static_cast<double>(c - 1)) / curve_scale;
  const double v = static_cast<double>(n_max) * std::pow(static_cast<double>(n_min) / static_cast<double>(n_max), e);
  // Guard exact endpoints against a last-ulp undershoot before flooring.
  return static_cast<long>(std::floor(v * (1.0 + 1e-12)));
}

namespace {

std::vector<double> gaussian(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

struct Style {
  Matrix a;
  std::vector<double> t;
};

Style draw_style(Rng& rng, std::size_t d, double strength, double shift) {
  for (;;) {
    Matrix a = Matrix::identity(d);
    const double s = strength / std::sqrt(static_cast<double>(d));
    for (double& v : a.values()) v += s * rng.normal();
    const auto eig = symmetric_eigen(matmul_tn(a, a));
    if (eig.values.front() > 0.04) return {std::move(a), gaussian(rng, d, shift)};
  }
}

}  // namespace

Dataset generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.num_classes;
  const std::size_t K = cfg.train_domains;
  const std::size_t D = cfg.d_x;
  Rng root(cfg.seed);
  Rng anchor_rng = root.split(1), sem_rng = root.split(2), style_rng = root.split(3), assign_rng = root.split(4),
      sample_rng = root.split(5);

  std::vector<std::vector<double>> centers(cfg.groups);
  for (auto& z : centers) z = gaussian(anchor_rng, D);
  Matrix anchors(C, D);
  Matrix directions(C, D);
  for (std::size_t c = 0; c < C; ++c) {
    const auto& z = centers[c % cfg.groups];
    auto row = anchors.row(c);
    for (std::size_t k = 0; k < D; ++k) row[k] = cfg.anchor_spread * (z[k] + cfg.group_spread * anchor_rng.normal());
    if (norm2(row) > 1e-12) directions.set_row(c, unit_normalize(row));
  }

  Matrix proj(cfg.d_s, D);
  for (double& v : proj.values()) v = sem_rng.normal();
  Matrix sem(C, cfg.d_s);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> p(cfg.d_s);
    for (std::size_t r = 0; r < cfg.d_s; ++r) p[r] = dot(proj.row(r), anchors.row(c));
    std::vector<double> s = norm2(p) > 1e-12 ? unit_normalize(p) : std::vector<double>(cfg.d_s, 0.0);
    const double ns = cfg.semantic_noise / std::sqrt(static_cast<double>(cfg.d_s));
    for (double& v : s) v += ns * sem_rng.normal();
    sem.set_row(c, s);
  }

  std::vector<Style> styles;
  for (std::size_t k = 0; k <= K; ++k) styles.push_back(draw_style(style_rng, D, cfg.transform_strength, cfg.shift_scale));

  Dataset ds;
  ds.num_classes = C;
  ds.num_domains = K + 1;
  ds.d_x = D;
  ds.semantic = SemanticTable::normalized(sem);

  auto draw = [&](std::size_t c, std::size_t k, Split split) {
    std::vector<double> latent(D);
    const double xi = sample_rng.normal();
    auto a = anchors.row(c);
    auto u = directions.row(c);
    for (std::size_t j = 0; j < D; ++j)
      latent[j] = a[j] + cfg.noise_scale * (sample_rng.normal() + cfg.anisotropy * xi * u[j]);
    Sample s;
    s.x.resize(D);
    for (std::size_t r = 0; r < D; ++r) s.x[r] = dot(styles[k].a.row(r), latent) + styles[k].t[r];
    s.label = c;
    s.domain = k;
    s.split = split;
    ds.samples.push_back(std::move(s));
  };

  const auto budget = cfg.budget();
  const double scale = cfg.effective_curve_scale();
  losses::DomainClassCounts counts(K + 1, C);
  for (std::size_t c = 0; c + cfg.open_classes < C; ++c) {
    const long n = longtail_counts(c + 1, cfg.n_max, cfg.n_min, C, scale);
    const std::size_t b = std::min<std::size_t>(budget[c], static_cast<std::size_t>(n));
    std::vector<std::size_t> doms(K);
    std::iota(doms.begin(), doms.end(), std::size_t{0});
    std::shuffle(doms.begin(), doms.end(), assign_rng);
    doms.resize(b);
    std::sort(doms.begin(), doms.end());
    for (std::size_t d : doms) counts.at(d, c) = 1;
    for (long i = static_cast<long>(b); i < n; ++i) ++counts.at(doms[assign_rng.index(b)], c);
  }
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (long i = 0; i < counts.at(k, c); ++i) draw(c, k, Split::train);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      if (counts.present(k, c) || c + cfg.open_classes >= C)
        for (std::size_t i = 0; i < cfg.val_per_class; ++i) draw(c, k, Split::val);
  for (std::size_t k = 0; k <= K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < cfg.test_per_class; ++i) draw(c, k, Split::test);
  ds.counts = counts;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw IoError("format_double: conversion failed");
  return std::string(buf, end);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v))
    throw InputError("not a finite number: '" + std::string(s) + "'");
  return v;
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t p = line.find(',', start);
    out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

std::size_t parse_index(std::string_view s) {
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty())
    throw InputError("not a non-negative integer: '" + std::string(s) + "'");
  return v;
}

void write_samples(std::ostream& out, const Dataset& ds) {
  out << "domain,label,split";
  for (std::size_t k = 0; k < ds.d_x; ++k) out << ",x_" << k;
  out << '\n';
  for (const Sample& s : ds.samples) {
    out << s.domain << ',' << s.label << ',' << to_string(s.split);
    for (double v : s.x) out << ',' << format_double(v);
    out << '\n';
  }
}

void write_embeddings(std::ostream& out, const SemanticTable& t) {
  out << "label";
  for (std::size_t k = 0; k < t.dim(); ++k) out << ",s_" << k;
  out << '\n';
  for (std::size_t c = 0; c < t.num_classes(); ++c) {
    out << c;
    for (double v : t.matrix().row(c)) out << ',' << format_double(v);
    out << '\n';
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

void expect_header(const std::vector<std::string_view>& cols, std::size_t fixed,
                   std::initializer_list<std::string_view> names, std::string_view prefix, const std::string& file) {
  std::size_t i = 0;
  for (auto n : names) {
    if (i >= cols.size() || cols[i] != n)
      throw ParseError(file, 1, "expected column '" + std::string(n) + "'");
    ++i;
  }
  for (std::size_t k = fixed; k < cols.size(); ++k)
    if (cols[k] != std::string(prefix) + std::to_string(k - fixed))
      throw ParseError(file, 1, "unexpected column '" + std::string(cols[k]) + "'");
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_samples(out, ds);
  if (!out) throw IoError("write failed: " + path.string());
}

void save_embeddings(const SemanticTable& table, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_embeddings(out, table);
  if (!out) throw IoError("write failed: " + path.string());
}

SemanticTable load_embeddings(const std::filesystem::path& path, std::size_t num_classes, std::size_t d_s) {
  auto in = open_in(path);
  const std::string file = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(file, 1, "empty file");
  auto header = split_csv(line);
  expect_header(header, 1, {"label"}, "s_", file);
  if (header.size() - 1 != d_s)
    throw ParseError(file, 1, "expected " + std::to_string(d_s) + " embedding columns, found " +
                                  std::to_string(header.size() - 1));
  Matrix rows(num_classes, d_s);
  std::vector<bool> seen(num_classes, false);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_csv(line);
    if (cols.size() != d_s + 1)
      throw ParseError(file, lineno, "expected " + std::to_string(d_s + 1) + " fields, found " +
                                         std::to_string(cols.size()));
    try {
      const std::size_t c = parse_index(cols[0]);
      if (c >= num_classes) throw InputError("label " + std::to_string(c) + " out of range");
      if (seen[c]) throw InputError("duplicate label " + std::to_string(c));
      seen[c] = true;
      for (std::size_t k = 0; k < d_s; ++k) rows(c, k) = parse_double(cols[k + 1]);
    } catch (const InputError& e) {
      throw ParseError(file, lineno, e.what());
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    if (!seen[c]) throw ParseError(file, lineno, "missing embedding for class " + std::to_string(c));
  // Rows that are already unit length are kept bit-exact so save/load round-trips.
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (std::abs(norm2(rows.row(c)) - 1.0) <= 1e-14) continue;
    try {
      rows.set_row(c, unit_normalize(rows.row(c)));
    } catch (const DomainError& e) {
      throw ParseError(file, lineno, "class " + std::to_string(c) + ": " + e.what());
    }
  }
  return SemanticTable(std::move(rows));
}

Dataset load_dataset(const std::filesystem::path& samples, const std::filesystem::path& embeddings) {
  auto in = open_in(samples);
  const std::string file = samples.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(file, 1, "empty file");
  auto header = split_csv(line);
  expect_header(header, 3, {"domain", "label", "split"}, "x_", file);
  Dataset ds;
  ds.d_x = header.size() - 3;
  if (ds.d_x == 0) throw ParseError(file, 1, "no feature columns");
  std::size_t lineno = 1;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_csv(line);
    if (cols.size() != ds.d_x + 3)
      throw ParseError(file, lineno, "expected " + std::to_string(ds.d_x + 3) + " fields, found " +
                                         std::to_string(cols.size()));
    try {
      Sample s;
      s.domain = parse_index(cols[0]);
      s.label = parse_index(cols[1]);
      s.split = split_from_string(std::string(cols[2]));
      s.x.resize(ds.d_x);
      for (std::size_t k = 0; k < ds.d_x; ++k) s.x[k] = parse_double(cols[k + 3]);
      ds.num_domains = std::max(ds.num_domains, s.domain + 1);
      max_label = std::max(max_label, s.label);
      ds.samples.push_back(std::move(s));
    } catch (const InputError& e) {
      throw ParseError(file, lineno, e.what());
    }
  }
  // The class count comes from the embedding file.
  std::size_t emb_classes = 0, emb_dim = 0;
  {
    auto ein = open_in(embeddings);
    std::string l;
    if (!std::getline(ein, l)) throw ParseError(embeddings.string(), 1, "empty file");
    emb_dim = split_csv(l).size() - 1;
    while (std::getline(ein, l))
      if (!l.empty()) ++emb_classes;
  }
  if (!ds.samples.empty() && max_label >= emb_classes)
    throw ParseError(file, lineno, "label " + std::to_string(max_label) + " has no embedding row");
  ds.num_classes = emb_classes;
  ds.semantic = load_embeddings(embeddings, emb_classes, emb_dim);
  ds.recount();
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

Batch gather(const Dataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  b.x = ds.features(idx);
  b.indices.assign(idx.begin(), idx.end());
  for (std::size_t i : idx) {
    b.labels.push_back(ds.samples[i].label);
    b.domains.push_back(ds.samples[i].domain);
  }
  return b;
}

Batch sample_batch(const Dataset& ds, std::span<const std::size_t> pool, std::size_t batch_size, Rng& rng) {
  if (pool.empty()) throw InputError("sample_batch: domain has no training samples");
  if (batch_size == 0) throw InputError("sample_batch: batch size must be >= 1");
  std::vector<std::size_t> idx(batch_size);
  for (std::size_t& i : idx) i = pool[rng.index(pool.size())];
  return gather(ds, idx);
}

Batch sample_batch(const Dataset& ds, std::size_t domain, std::size_t batch_size, Rng& rng) {
  const auto pool = ds.indices(domain, Split::train);
  return sample_batch(ds, pool, batch_size, rng);
}

Batch concat(std::span<const Batch> parts) {
  Batch out;
  std::size_t n = 0, d = 0;
  for (const Batch& b : parts) {
    n += b.x.rows();
    if (b.x.rows() > 0) d = b.x.cols();
  }
  out.x = Matrix(n, d);
  std::size_t r = 0;
  for (const Batch& b : parts) {
    for (std::size_t i = 0; i < b.x.rows(); ++i) out.x.set_row(r++, b.x.row(i));
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.domains.insert(out.domains.end(), b.domains.begin(), b.domains.end());
    out.indices.insert(out.indices.end(), b.indices.begin(), b.indices.end());
  }
  return out;
}

std::uint64_t fingerprint(const Dataset& ds) {
  std::ostringstream os;
  write_samples(os, ds);
  write_embeddings(os, ds.semantic);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ltds::data
