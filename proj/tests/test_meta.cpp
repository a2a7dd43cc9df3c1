#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "ltds/error.hpp"
#include "ltds/meta.hpp"
#include "support.hpp"

using namespace ltds;
using namespace ltds::meta;

namespace {

data::SyntheticConfig toy_data(std::size_t domains = 3) {
  data::SyntheticConfig c;
  c.num_classes = 5;
  c.train_domains = domains;
  c.d_x = 4;
  c.d_s = 6;
  c.n_max = 30;
  c.n_min = 4;
  c.val_per_class = 2;
  c.test_per_class = 2;
  c.seed = 9;
  return c;
}

model::ModelConfig toy_model(const data::Dataset& ds, std::vector<std::size_t> hidden = {8}, std::size_t d_v = 6) {
  model::ModelConfig mc;
  mc.d_x = ds.d_x;
  mc.hidden = std::move(hidden);
  mc.d_v = d_v;
  mc.d_s = ds.semantic.dim();
  mc.num_classes = ds.num_classes;
  return mc;
}

TrainConfig toy_train() {
  TrainConfig t;
  t.t_max = 12;
  t.t_sigma = 4;
  t.batch_size = 6;
  t.ap.k = 2;
  t.cp.tau = 0.2;
  t.seed = 3;
  return t;
}

struct Episode {
  data::Batch mtr, mte;
  std::vector<std::size_t> mtr_domains;
  banks::PrototypeBank bank;
  std::vector<Matrix> sigma;
};

/// A meta-train batch over domains {0,1} and a meta-test batch from domain 2, with
/// populated banks.
Episode episode(const data::Dataset& ds, const model::ModelParams& p, std::size_t b, Rng& rng) {
  Episode e;
  e.mtr_domains = {0, 1};
  std::vector<data::Batch> parts;
  for (std::size_t d : e.mtr_domains) parts.push_back(data::sample_batch(ds, d, b, rng));
  e.mtr = data::concat(parts);
  e.mte = data::sample_batch(ds, 2, b, rng);
  e.bank = banks::PrototypeBank::from_counts(ds.counts, p.config.d_v);
  banks::CovarianceBank cov(ds.num_classes, p.config.d_v);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Matrix z = model::forward_features(p, parts[k].x);
    banks::update_prototypes(e.bank, e.mtr_domains[k], z, parts[k].labels);
    banks::update_covariance(cov, z, parts[k].labels);
  }
  e.sigma = banks::blend_covariance(cov, ds.semantic, 2, true).sigma;
  return e;
}

LossContext context(const data::Dataset& ds, const Episode& e, const TrainConfig& cfg, bool aug) {
  LossContext ctx;
  ctx.table = &ds.semantic;
  ctx.counts = &ds.counts;
  ctx.bank = &e.bank;
  ctx.mtr_domains = e.mtr_domains;
  ctx.slots = e.mtr_domains;
  ctx.sigma_prime = aug ? &e.sigma : nullptr;
  ctx.cfg = &cfg;
  return ctx;
}

double mean_z2s(const Matrix& emb, std::span<const std::size_t> labels, const SemanticTable& t,
                const losses::ContrastiveParams& cp) {
  double s = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) s += losses::z2s_loss(emb.row(i), labels[i], t, cp);
  return s / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("split_domains") {
  Rng rng(1);
  const std::vector<std::size_t> two{0, 1};
  for (int t = 0; t < 10; ++t) {
    const auto [mtr, mte] = split_domains(two, 1, rng);
    CHECK(mtr.size() == 1);
    CHECK(mte.size() == 1);
    CHECK(mtr[0] != mte[0]);
  }
  const std::vector<std::size_t> four{0, 1, 2, 3};
  std::set<std::size_t> seen;
  for (int t = 0; t < 40; ++t) {
    const auto [mtr, mte] = split_domains(four, 1, rng);
    CHECK(mtr.size() == 3);
    std::set<std::size_t> u(mtr.begin(), mtr.end());
    u.insert(mte.begin(), mte.end());
    CHECK(u.size() == 4);
    seen.insert(mte[0]);
  }
  CHECK(seen.size() == 4);
  Rng a(5), b(5);
  for (int t = 0; t < 10; ++t) CHECK(split_domains(four, 2, a) == split_domains(four, 2, b));
  CHECK_THROWS_AS(split_domains(four, 4, rng), ConfigError);
  CHECK_THROWS_AS(split_domains(four, 0, rng), ConfigError);
}

TEST_CASE("ablation rows") {
  const Ablation a = Ablation::row('a');
  CHECK_FALSE(a.use_dc);
  CHECK_FALSE((a.use_z2s || a.use_s2s || a.use_s2z || a.use_aug || a.use_meta));
  CHECK(Ablation::row('j') == Ablation{});
  CHECK(Ablation::from_name("row_k").single_prototype);
  CHECK(Ablation::from_name("l").unweighted_blend);
  CHECK_THROWS_AS(Ablation::from_name("m"), ConfigError);
  CHECK_THROWS_AS(Ablation::from_name("row_ab"), ConfigError);
}

TEST_CASE("meta-train objective reductions") {
  const data::Dataset ds = data::generate(toy_data());
  Rng rng(2);
  const model::ModelParams p = model::init_params(toy_model(ds), rng);
  const Episode e = episode(ds, p, 5, rng);
  const Matrix logits = model::forward_logits(p, model::forward_features(p, e.mtr.x));

  SUBCASE("row a is plain cross-entropy") {
    TrainConfig cfg = toy_train();
    cfg.ablation = Ablation::row('a');
    const MtrResult r = meta_train_losses(p, e.mtr, context(ds, e, cfg, true));
    double ce = 0;
    for (std::size_t i = 0; i < e.mtr.labels.size(); ++i) ce += losses::cross_entropy(logits.row(i), e.mtr.labels[i]);
    CHECK(r.terms.total == doctest::Approx(ce / static_cast<double>(e.mtr.labels.size())).epsilon(1e-13));
  }
  SUBCASE("zero auxiliary weights leave the calibrated loss") {
    TrainConfig cfg = toy_train();
    cfg.w1 = cfg.w2 = cfg.w3 = cfg.w4 = 0.0;
    const MtrResult r = meta_train_losses(p, e.mtr, context(ds, e, cfg, true));
    double dc = 0;
    for (std::size_t i = 0; i < e.mtr.labels.size(); ++i)
      dc += losses::dc_loss(logits.row(i), e.mtr.labels[i], e.mtr.domains[i], ds.counts);
    CHECK(r.terms.total == doctest::Approx(dc / static_cast<double>(e.mtr.labels.size())).epsilon(1e-13));
    CHECK(r.terms.total == r.terms.cls);
  }
}

TEST_CASE("meta-train objective matches a component-wise oracle") {
  const data::Dataset ds = data::generate(toy_data());
  Rng rng(3);
  const model::ModelParams p = model::init_params(toy_model(ds), rng);
  const Episode e = episode(ds, p, 4, rng);
  TrainConfig cfg = toy_train();
  cfg.w1 = 0.3;
  cfg.w2 = 0.2;
  cfg.w3 = 0.15;
  cfg.w4 = 0.4;
  const MtrResult r = meta_train_losses(p, e.mtr, context(ds, e, cfg, true));

  const Matrix z = model::forward_features(p, e.mtr.x);
  const Matrix logits = model::forward_logits(p, z);
  const std::size_t n = e.mtr.labels.size();
  double cls = 0, aug = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cls += losses::dc_loss(logits.row(i), e.mtr.labels[i], e.mtr.domains[i], ds.counts);
    aug += losses::aug_loss(z.row(i), e.mtr.labels[i], p.classifier.w, p.classifier.b, e.sigma[e.mtr.labels[i]],
                            {cfg.ap.lambda, cfg.ap.k});
  }
  cls /= static_cast<double>(n);
  aug /= static_cast<double>(n);
  const double z2s = mean_z2s(model::encode(p, z), e.mtr.labels, ds.semantic, cfg.cp);
  std::vector<Matrix> s_hat;
  for (std::size_t d : e.mtr_domains) s_hat.push_back(banks::complete_semantic(e.bank, p, ds.semantic, d));
  const double s2s = 0.5 * (losses::s2s_loss(s_hat[0], s_hat[1], cfg.cp) + losses::s2s_loss(s_hat[1], s_hat[0], cfg.cp)) +
                     0.5 * (losses::s2s_loss(s_hat[0], ds.semantic.matrix(), cfg.cp) +
                            losses::s2s_loss(s_hat[1], ds.semantic.matrix(), cfg.cp));
  double s2z = 0;
  for (const Matrix& s : s_hat) s2z += 0.5 * losses::s2z_loss(model::decode(p, s), p, ds.semantic, cfg.cp);

  CHECK(r.terms.cls == doctest::Approx(cls).epsilon(1e-12));
  CHECK(r.terms.z2s == doctest::Approx(z2s).epsilon(1e-12));
  CHECK(r.terms.s2s == doctest::Approx(s2s).epsilon(1e-12));
  CHECK(r.terms.s2z == doctest::Approx(s2z).epsilon(1e-12));
  CHECK(r.terms.aug == doctest::Approx(aug).epsilon(1e-12));
  const double resum = r.terms.cls + cfg.w1 * r.terms.z2s + cfg.w2 * r.terms.s2s + cfg.w3 * r.terms.s2z +
                       cfg.w4 * r.terms.aug;
  CHECK(std::abs(resum - r.terms.total) < 1e-10);
  CHECK(r.grad.value == r.terms.total);
}

TEST_CASE("meta-test objective") {
  const data::Dataset ds = data::generate(toy_data());
  Rng rng(4);
  const model::ModelParams p = model::init_params(toy_model(ds), rng);
  const Episode e = episode(ds, p, 4, rng);
  TrainConfig cfg = toy_train();
  const LossContext ctx = context(ds, e, cfg, true);

  const MteResult r = meta_test_losses(p, e.mte, ctx);
  const Matrix z = model::forward_features(p, e.mte.x);
  const Matrix emb = model::encode(p, z);
  double z2s = mean_z2s(emb, e.mte.labels, ds.semantic, cfg.cp);
  for (std::size_t d : e.mtr_domains) {
    const SemanticTable s(banks::complete_semantic(e.bank, p, ds.semantic, d));
    z2s += 0.5 * mean_z2s(emb, e.mte.labels, s, cfg.cp);
  }
  CHECK(r.terms.z2s == doctest::Approx(z2s).epsilon(1e-12));
  CHECK(std::abs(r.terms.cls + cfg.w1 * r.terms.z2s + cfg.w4 * r.terms.aug - r.terms.total) < 1e-10);

  TrainConfig zero = cfg;
  zero.w1 = zero.w4 = 0.0;
  const MteResult c = meta_test_losses(p, e.mte, context(ds, e, zero, true));
  CHECK(c.terms.total == c.terms.cls);

  // Same concrete batch and θ' = θ: meta-test and meta-train classification agree.
  LossContext open = context(ds, e, cfg, false);
  open.mtr_domains = {};
  const MteResult same = meta_test_losses(p, e.mtr, open);
  const MtrResult tr = meta_train_losses(p, e.mtr, open);
  CHECK(same.terms.cls == tr.terms.cls);

  CHECK_THROWS_AS(meta_test_losses(p, e.mtr, ctx), ProtocolError);
}

TEST_CASE("augmentation is off before T_sigma") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  const RunResult r = run(ds, toy_model(ds), cfg);
  REQUIRE(r.reports.size() == cfg.total_steps());
  for (const StepReport& s : r.reports) {
    if (s.step < cfg.sigma_step()) {
      CHECK(s.mtr.aug == 0.0);
      CHECK(s.mte.aug == 0.0);
    } else {
      CHECK(s.mtr.aug > 0.0);
    }
  }
}

TEST_CASE("step reports re-sum and are finite") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  const RunResult r = run(ds, toy_model(ds), cfg);
  for (const StepReport& s : r.reports) {
    const double mtr = s.mtr.cls + cfg.w1 * s.mtr.z2s + cfg.w2 * s.mtr.s2s + cfg.w3 * s.mtr.s2z + cfg.w4 * s.mtr.aug;
    const double mte = s.mte.cls + cfg.w1 * s.mte.z2s + cfg.w4 * s.mte.aug;
    CHECK(std::abs(mtr - s.mtr.total) < 1e-10);
    CHECK(std::abs(mte - s.mte.total) < 1e-10);
    for (double v : {s.mtr.total, s.mte.total, s.grad_norm}) CHECK(std::isfinite(v));
    CHECK(s.mte_domains.size() == cfg.mte_size);
  }
}

TEST_CASE("conventional training equals plain gradient descent") {
  const data::Dataset ds = data::generate(toy_data());
  const model::ModelConfig mc = toy_model(ds);
  TrainConfig cfg = toy_train();
  cfg.t_max = 10;
  cfg.ablation.use_meta = false;
  cfg.w1 = cfg.w2 = cfg.w3 = cfg.w4 = 0.0;

  const RunResult r = run(ds, mc, cfg);

  TrainState s = init_state(ds, mc, cfg);
  model::ModelParams p = s.params;
  Rng rng = s.rng;
  for (std::size_t step = 0; step < 10; ++step) {
    std::vector<data::Batch> parts;
    for (std::size_t d : ds.train_domains()) parts.push_back(data::sample_batch(ds, d, cfg.batch_size, rng));
    const data::Batch b = data::concat(parts);
    const auto blocks = p.blocks();
    const GradResult g = grad(
        [&](ad::Tape& t, std::span<const ad::Var> leaves) {
          model::Bound m(p, leaves, model::Mode::train);
          return losses::dc_loss_mean(m.logits(m.features(t.constant(b.x))), b.labels, b.domains, ds.counts);
        },
        blocks);
    CHECK(g.value == r.reports[step].mtr.total);
    p = model::apply_step(p, g, cfg.beta2_at(step));
  }
  CHECK(r.state.params == p);
}

TEST_CASE("meta-test data is untouched when w_mte is zero") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  cfg.w_mte = 0.0;
  const RunResult r = run(ds, toy_model(ds), cfg);
  for (const StepReport& s : r.reports) CHECK(s.mte_samples_read == 0);
  TrainConfig on = toy_train();
  CHECK(run(ds, toy_model(ds), on).reports[0].mte_samples_read == on.batch_size);
}

TEST_CASE("single prototype coincides with per-domain prototypes for one domain") {
  const data::Dataset ds = data::generate(toy_data(1));
  TrainConfig cfg = toy_train();
  cfg.ablation.use_meta = false;
  TrainConfig single = cfg;
  single.ablation.single_prototype = true;
  const RunResult a = run(ds, toy_model(ds), cfg);
  const RunResult b = run(ds, toy_model(ds), single);
  CHECK(a.state.params == b.state.params);
  for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(to_jsonl(a.reports[i]) == to_jsonl(b.reports[i]));
}

TEST_CASE("runs are deterministic") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  cfg.eval_every = 3;
  const RunResult a = run(ds, toy_model(ds), cfg);
  const RunResult b = run(ds, toy_model(ds), cfg);
  CHECK(a.state == b.state);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].val_acc == b.history[i].val_acc);
  for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(to_jsonl(a.reports[i]) == to_jsonl(b.reports[i]));
}

TEST_CASE("resuming from a mid-run state reproduces the trace") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  const RunResult full = run(ds, toy_model(ds), cfg);
  TrainConfig half = cfg;
  std::optional<TrainState> mid;
  RunOptions o;
  o.after_step = [&](const TrainState& s) {
    if (s.step == 5) mid = s;
  };
  run(ds, toy_model(ds), half, o);
  REQUIRE(mid.has_value());
  RunOptions r;
  r.resume = mid;
  const RunResult rest = run(ds, toy_model(ds), cfg, r);
  CHECK(rest.state == full.state);
  for (std::size_t i = 0; i < rest.reports.size(); ++i)
    CHECK(to_jsonl(rest.reports[i]) == to_jsonl(full.reports[5 + i]));
}

TEST_CASE("first-order and finite-difference meta-gradients") {
  data::SyntheticConfig dc = toy_data();
  dc.d_x = 2;
  dc.d_s = 2;
  dc.num_classes = 3;
  const data::Dataset ds = data::generate(dc);
  const model::ModelConfig mc = toy_model(ds, {4}, 3);
  Rng rng(7);
  const model::ModelParams p = model::init_params(mc, rng);
  REQUIRE(p.parameter_count() <= 64);
  TrainConfig cfg = toy_train();
  cfg.ap.k = 1;
  const Episode e = episode(ds, p, 6, rng);
  const LossContext ctx = context(ds, e, cfg, true);

  const MtrResult tr = meta_train_losses(p, e.mtr, ctx);
  const model::ModelParams prime = inner_step(p, tr.grad, cfg.beta1);
  const MteResult te = meta_test_losses(prime, e.mte, ctx);
  const auto fo = first_order_meta_gradient(tr.grad, &te.grad, cfg.w_mte);
  const auto fd = fd_meta_gradient(p, e.mtr, e.mte, ctx);
  CHECK(cosine_similarity(flatten(fo), flatten(fd)) > 0.9);

  // Without the meta-test term both reduce to the meta-train gradient.
  TrainConfig plain = cfg;
  plain.w_mte = 0.0;
  const LossContext pctx = context(ds, e, plain, true);
  const auto fo0 = first_order_meta_gradient(tr.grad, &te.grad, 0.0);
  const auto fd0 = fd_meta_gradient(p, e.mtr, e.mte, pctx);
  CHECK(fo0 == tr.grad.grads);
  CHECK(max_relative_error(GradResult{0, fo0}, GradResult{0, fd0}) < 1e-4);
  CHECK(outer_step(p, fo, 0.0) == p);
}

TEST_CASE("fd_exact refuses large models") {
  const data::Dataset ds = data::generate(toy_data());
  TrainConfig cfg = toy_train();
  cfg.meta_mode = MetaMode::fd_exact;
  CHECK_THROWS_AS(init_state(ds, toy_model(ds, {64}, 32), cfg), ConfigError);
}

TEST_CASE("config validation") {
  TrainConfig cfg = toy_train();
  CHECK_THROWS_AS(cfg.validate(1), ConfigError);
  cfg.ablation.use_meta = false;
  CHECK_NOTHROW(cfg.validate(1));
  cfg.t_sigma = cfg.t_max + 1;
  CHECK_THROWS_AS(cfg.validate(3), ConfigError);
  TrainConfig lr = toy_train();
  lr.t_max = 10;
  CHECK(lr.beta2_at(0) == lr.beta2);
  CHECK(lr.beta2_at(4) == doctest::Approx(lr.beta2 * 0.1));
  CHECK(lr.beta2_at(8) == doctest::Approx(lr.beta2 * 0.01));
}

TEST_CASE("row a learns a separable balanced toy") {
  data::Dataset ds;
  ds.num_classes = 3;
  ds.num_domains = 3;
  ds.d_x = 2;
  const double centers[3][2] = {{3, 0}, {-3, 2}, {0, -3}};
  Rng rng(8);
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t c = 0; c < 3; ++c)
      for (int i = 0; i < 10; ++i)
        ds.samples.push_back(data::Sample{{centers[c][0] + 0.3 * rng.normal(), centers[c][1] + 0.3 * rng.normal()},
                                          c, d, data::Split::train});
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t c = 0; c < 3; ++c)
      ds.samples.push_back(data::Sample{{centers[c][0], centers[c][1]}, c, d, data::Split::test});
  ds.semantic = SemanticTable::normalized(Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  ds.recount();
  ds.validate();

  TrainConfig cfg;
  cfg.ablation = Ablation::row('a');
  cfg.t_max = 200;
  cfg.beta2 = 0.2;
  cfg.lr_milestones = {};
  cfg.batch_size = 8;
  model::ModelConfig mc;
  mc.d_x = 2;
  mc.hidden = {16};
  mc.d_v = 8;
  mc.d_s = 3;
  mc.num_classes = 3;
  const RunResult r = run(ds, mc, cfg);
  const auto idx = ds.indices(data::Split::train);
  const Matrix logits = model::forward_logits(r.state.params, model::forward_features(r.state.params, ds.features(idx)));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto row = logits.row(i);
    const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += arg == ds.samples[idx[i]].label;
  }
  CHECK(hit == idx.size());
}
