#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ltds/error.hpp"
#include "ltds/eval.hpp"
#include "ltds/linalg.hpp"
#include "support.hpp"

using namespace ltds;
using namespace ltds::eval;

namespace {

struct Fixture {
  Matrix logits;
  std::vector<std::size_t> labels, domains;
  std::vector<bool> known;
};

Fixture random_fixture(Rng& rng, std::size_t n, std::size_t c, std::size_t k, std::size_t open) {
  Fixture f;
  f.logits = test::random_matrix(rng, n, c, 2.0);
  f.known.assign(c, true);
  for (std::size_t i = 0; i < open; ++i) f.known[c - 1 - i] = false;
  for (std::size_t i = 0; i < n; ++i) {
    f.labels.push_back(rng.index(c));
    f.domains.push_back(rng.index(k));
    // Nudge the true class up so accuracies are not trivially low.
    if (f.known[f.labels[i]] && rng.uniform() < 0.6) f.logits(i, f.labels[i]) += 3.0;
  }
  return f;
}

/// Straight-line metrics for a fixed threshold on max softmax over known classes.
MetricReport brute(const Fixture& f, std::size_t k, std::size_t heldout, double threshold) {
  const std::size_t n = f.labels.size(), c = f.known.size();
  double a_hit = 0, a_n = 0, b_hit = 0, b_n = 0;
  std::vector<double> d_hit(k, 0), d_n(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (f.known[j]) mx = std::max(mx, f.logits(i, j));
    double z = 0;
    std::size_t arg = c;
    for (std::size_t j = 0; j < c; ++j)
      if (f.known[j]) {
        z += std::exp(f.logits(i, j) - mx);
        if (arg == c && f.logits(i, j) == mx) arg = j;
      }
    const bool open = 1.0 / z < threshold;
    if (f.known[f.labels[i]]) {
      const bool ok = !open && arg == f.labels[i];
      a_hit += ok;
      a_n += 1;
      d_hit[f.domains[i]] += ok;
      d_n[f.domains[i]] += 1;
    } else {
      b_hit += open;
      b_n += 1;
    }
  }
  MetricReport r;
  r.known_acc = a_n > 0 ? 100 * a_hit / a_n : 0;
  r.open_acc = b_n > 0 ? 100 * b_hit / b_n : 0;
  r.acc_u = d_n[heldout] > 0 ? 100 * d_hit[heldout] / d_n[heldout] : 0;
  double s = 0;
  std::size_t used = 0;
  for (std::size_t d = 0; d < k; ++d)
    if (d_n[d] > 0) s += 100 * d_hit[d] / d_n[d], ++used;
  r.acc = used > 0 ? s / static_cast<double>(used) : 0;
  const double a = r.known_acc, b = r.open_acc;
  r.h = b_n == 0 ? r.acc : (a + b > 0 ? 2 * a * b / (a + b) : 0);
  return r;
}

EvalOptions fixed(double t) {
  EvalOptions o;
  o.threshold = t;
  return o;
}

data::Dataset small_dataset(std::uint64_t seed) {
  data::SyntheticConfig c;
  c.num_classes = 6;
  c.train_domains = 2;
  c.d_x = 4;
  c.d_s = 8;
  c.n_max = 20;
  c.n_min = 3;
  c.val_per_class = 2;
  c.test_per_class = 2;
  c.seed = seed;
  return data::generate(c);
}

model::ModelParams model_for(const data::Dataset& ds, Rng& rng) {
  model::ModelConfig mc;
  mc.d_x = ds.d_x;
  mc.hidden = {8};
  mc.d_v = 5;
  mc.d_s = ds.semantic.dim();
  mc.num_classes = ds.num_classes;
  return model::init_params(mc, rng);
}

}  // namespace

TEST_CASE("predict_open examples") {
  const std::vector<double> z{2, 0};
  const OpenDecision d = predict_open(z, 0.5);
  CHECK(d.label == 0);
  CHECK(d.confidence == doctest::Approx(std::exp(2.0) / (std::exp(2.0) + 1)).epsilon(1e-14));
  Rng rng(51);
  for (int t = 0; t < 20; ++t) {
    const Matrix l = test::random_matrix(rng, 1, 5, 4.0);
    CHECK_FALSE(predict_open(l.row(0), 0.0).open());
    CHECK(predict_open(l.row(0), 1.0 + 1e-9).open());
  }
  const std::vector<double> tie{1, 3, 3};
  CHECK(predict_open(tie, 0.0).label == 1);
  const std::vector<bool> known{true, false, true};
  CHECK(predict_open(tie, known, 0.0).label == 2);
}

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(60, 40) == doctest::Approx(48.0));
  CHECK(harmonic_mean(37.5, 37.5) == doctest::Approx(37.5));
  CHECK(harmonic_mean(0, 0) == 0.0);
}

TEST_CASE("perfect closed-set classifier scores 100") {
  const std::size_t n = 12, c = 4, k = 3;
  Matrix logits(n, c);
  std::vector<std::size_t> labels, domains;
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(i % c);
    domains.push_back(i % k);
    logits(i, i % c) = 10.0;
  }
  const MetricReport r = score(logits, labels, domains, std::vector<bool>(c, true), k, 2, fixed(0.0));
  CHECK(r.acc_u == 100.0);
  CHECK(r.acc == 100.0);
  CHECK(r.h_undefined);
  CHECK(r.h == r.acc);
}

TEST_CASE("score matches a brute-force oracle") {
  Rng rng(52);
  for (int t = 0; t < 30; ++t) {
    const std::size_t k = 3, heldout = 2;
    const Fixture f = random_fixture(rng, 10, 5, k, t % 3);
    const double thr = rng.uniform(0.0, 0.9);
    const MetricReport got = score(f.logits, f.labels, f.domains, f.known, k, heldout, fixed(thr));
    const MetricReport want = brute(f, k, heldout, thr);
    CHECK(got.acc_u == doctest::Approx(want.acc_u).epsilon(1e-12));
    CHECK(got.acc == doctest::Approx(want.acc).epsilon(1e-12));
    CHECK(got.known_acc == doctest::Approx(want.known_acc).epsilon(1e-12));
    CHECK(got.open_acc == doctest::Approx(want.open_acc).epsilon(1e-12));
    CHECK(got.h == doctest::Approx(want.h).epsilon(1e-12));
    CHECK(got.h_undefined == (t % 3 == 0));
    for (double v : {got.acc_u, got.acc, got.h}) CHECK((v >= 0 && v <= 100));
  }
}

TEST_CASE("raising the threshold trades known accuracy for open accuracy") {
  Rng rng(53);
  const Fixture f = random_fixture(rng, 200, 6, 2, 2);
  double prev_a = INFINITY, prev_b = -INFINITY;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const MetricReport r = score(f.logits, f.labels, f.domains, f.known, 2, 1, fixed(t));
    CHECK(r.known_acc <= prev_a);
    CHECK(r.open_acc >= prev_b);
    prev_a = r.known_acc;
    prev_b = r.open_acc;
  }
}

TEST_CASE("single domain without open classes has acc_u equal to acc") {
  Rng rng(54);
  const Fixture f = random_fixture(rng, 30, 4, 1, 0);
  const MetricReport r = score(f.logits, f.labels, f.domains, f.known, 1, 0, fixed(0.3));
  CHECK(r.acc_u == r.acc);
}

TEST_CASE("select_threshold") {
  Rng rng(55);
  const Fixture f = random_fixture(rng, 40, 5, 1, 2);
  const std::vector<double> zero{0.0};
  CHECK(select_threshold(f.logits, f.labels, f.known, zero) == 0.0);

  // Without open samples H is known accuracy, which only falls with the threshold.
  const Fixture closed = random_fixture(rng, 40, 5, 1, 0);
  const std::vector<double> tiny{0.0, 0.01, 0.02};
  CHECK(select_threshold(closed.logits, closed.labels, closed.known, tiny) == 0.0);

  for (int t = 0; t < 10; ++t) {
    const Fixture g = random_fixture(rng, 60, 5, 1, 2);
    const auto grid = default_threshold_grid();
    double best = -1, arg = -1;
    for (double thr : grid) {
      const double h = brute(g, 1, 0, thr).h;
      if (h > best) best = h, arg = thr;
    }
    CHECK(select_threshold(g.logits, g.labels, g.known, grid) == arg);
  }
  const auto grid = default_threshold_grid();
  CHECK(grid.size() == 20);
  CHECK(grid.front() == 0.0);
  CHECK(grid.back() == doctest::Approx(0.95));
}

TEST_CASE("evaluate uses the held-out test split") {
  const data::Dataset ds = small_dataset(3);
  Rng rng(56);
  const model::ModelParams p = model_for(ds, rng);
  const std::size_t held = ds.num_domains - 1;
  const MetricReport r = evaluate(p, ds, held, fixed(0.0));
  CHECK(r.heldout_domain == held);
  CHECK(r.num_samples == ds.indices(data::Split::test).size());
  CHECK(r.per_domain_acc.size() == ds.num_domains);
  CHECK(r.acc_u == doctest::Approx(r.per_domain_acc[held]));
  const MetricReport again = evaluate(p, ds, held, fixed(0.0));
  CHECK(to_json(again) == to_json(r));

  EvalOptions a;
  a.auto_threshold = true;
  const MetricReport chosen = evaluate(p, ds, held, a);
  CHECK(chosen.threshold == select_threshold(p, ds, a.grid));
}

TEST_CASE("frechet distance") {
  Rng rng(57);
  const Matrix s = test::random_psd(rng, 3);
  const std::vector<double> mu{1, 2, 3}, nu{1, 0, 3};
  CHECK(std::abs(frechet_distance(mu, s, mu, s)) < 1e-8);
  CHECK(frechet_distance(mu, s, nu, s) == doctest::Approx(4.0).epsilon(1e-8));
  const std::vector<double> z{0};
  CHECK(frechet_distance(z, Matrix{{1}}, z, Matrix{{4}}) == doctest::Approx(1.0).epsilon(1e-12));
  for (int t = 0; t < 10; ++t) {
    const Matrix a = test::random_psd(rng, 4), b = test::random_psd(rng, 4);
    const Matrix r1 = test::random_matrix(rng, 1, 4), r2 = test::random_matrix(rng, 1, 4);
    const std::span<const double> m1 = r1.values(), m2 = r2.values();
    const double ab = frechet_distance(m1, a, m2, b);
    CHECK(ab >= -1e-10);
    CHECK(ab == doctest::Approx(frechet_distance(m2, b, m1, a)).epsilon(1e-8));
  }
  CHECK_THROWS_AS(frechet_distance(z, Matrix{{-1}}, z, Matrix{{1}}), DomainError);
}

TEST_CASE("covariance distance matrix") {
  banks::CovarianceBank bank(3, 2);
  bank.set(0, std::vector<double>{0, 0}, Matrix::identity(2), 3);
  bank.set(1, std::vector<double>{0, 0}, 2.0 * Matrix::identity(2), 3);
  bank.set(2, std::vector<double>{0, 0}, Matrix{{1, 0.5}, {0.5, 3}}, 3);
  const Matrix d = covariance_distance_matrix(bank);
  CHECK(d(0, 1) == doctest::Approx(std::exp(-std::sqrt(2.0))).epsilon(1e-14));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(d(i, i) == 1.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(d(i, j) == d(j, i));
  }
}

TEST_CASE("topk retrieval matches a brute-force sort") {
  const data::Dataset ds = small_dataset(4);
  Rng rng(58);
  const model::ModelParams p = model_for(ds, rng);
  const auto gallery = ds.indices(data::Split::test);
  const Matrix e = model::encode(p, model::forward_features(p, ds.features(gallery)));
  for (std::size_t q : {gallery[0], gallery[7]}) {
    const auto& x = ds.samples[q].x;
    const Matrix eq = model::encode(p, model::forward_features(p, Matrix::row_vector(x)));
    std::vector<std::pair<std::size_t, double>> all;
    for (std::size_t g = 0; g < gallery.size(); ++g)
      if (gallery[g] != q) all.push_back({gallery[g], dot(eq.row(0), e.row(g))});
    std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.second > b.second; });
    const Retrieval r = topk_retrieval(x, p, ds, gallery, 5, q);
    REQUIRE(r.hits.size() == 5);
    CHECK_FALSE(r.truncated);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(r.hits[i].first == all[i].first);
      CHECK(r.hits[i].second == doctest::Approx(all[i].second).epsilon(1e-12));
    }
    const Retrieval full = topk_retrieval(x, p, ds, gallery, gallery.size() - 1, q);
    CHECK(full.hits.size() == all.size());
    const Retrieval over = topk_retrieval(x, p, ds, gallery, gallery.size() + 3, q);
    CHECK(over.truncated);
  }
  const std::vector<std::size_t> dup{gallery[3]};
  const Retrieval self = topk_retrieval(ds.samples[gallery[3]].x, p, ds, dup, 1);
  CHECK(self.hits[0].first == gallery[3]);
  CHECK(self.hits[0].second == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("feature dump round trip") {
  const data::Dataset ds = small_dataset(5);
  Rng rng(59);
  const model::ModelParams p = model_for(ds, rng);
  const auto dir = test::temp_dir("eval_dump");
  dump_features(p, ds, dir / "features.csv");
  const FeatureDump back = load_features(dir / "features.csv");
  std::vector<std::size_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), 0);
  CHECK(back.z.rows() == ds.samples.size());
  CHECK(back.z == model::forward_features(p, ds.features(all)));
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(back.labels[i] == ds.samples[i].label);
    CHECK(back.domains[i] == ds.samples[i].domain);
  }

  data::Dataset empty = ds;
  empty.samples.clear();
  dump_features(p, empty, dir / "empty.csv");
  const std::string text = test::read_file(dir / "empty.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  CHECK(text.rfind("domain,label,z_0", 0) == 0);
}
