#include "ltds/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

#include "ltds/banks.hpp"
#include "ltds/data.hpp"
#include "ltds/gradcheck.hpp"
#include "ltds/linalg.hpp"
#include "ltds/losses.hpp"
#include "ltds/meta.hpp"
#include "ltds/model.hpp"
#include "ltds/rng.hpp"

namespace ltds::gradsuite {

namespace {

struct Instance {
  LossFn loss;
  std::vector<Matrix> params;
};
using Maker = std::function<Instance(Rng&)>;

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

Matrix random_psd(Rng& rng, std::size_t d) {
  Matrix a = random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  return matmul_nt(a, a);
}

losses::ContrastiveParams random_cp(Rng& rng) { return {rng.uniform(0.0, 0.3), rng.uniform(0.25, 1.0)}; }

std::vector<std::size_t> random_labels(Rng& rng, std::size_t n, std::size_t C) {
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng.index(C);
  return y;
}

Instance make_dc(Rng& rng) {
  const std::size_t C = 5, K = 2, n = 6;
  std::vector<long> raw(K * C);
  for (auto& v : raw) v = rng.index(3) == 0 ? 0 : 1 + static_cast<long>(rng.index(50));
  for (std::size_t d = 0; d < K; ++d) raw[d * C] = std::max(raw[d * C], 1L);
  auto counts = std::make_shared<losses::DomainClassCounts>(K, C, raw);
  auto labels = std::make_shared<std::vector<std::size_t>>();
  auto domains = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = rng.index(K);
    std::size_t y;
    do y = rng.index(C);
    while (!counts->present(d, y));
    labels->push_back(y);
    domains->push_back(d);
  }
  return {[=](ad::Tape&, std::span<const ad::Var> p) { return losses::dc_loss_mean(p[0], *labels, *domains, *counts); },
          {random_matrix(rng, n, C, 2.0)}};
}

Instance make_ce(Rng& rng) {
  auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(rng, 6, 5));
  return {[=](ad::Tape&, std::span<const ad::Var> p) { return losses::ce_loss_mean(p[0], *labels); },
          {random_matrix(rng, 6, 5, 2.0)}};
}

Instance make_z2s(Rng& rng) {
  const std::size_t C = 5, d = 4, n = 6;
  auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(rng, n, C));
  const auto cp = random_cp(rng);
  return {[=](ad::Tape&, std::span<const ad::Var> p) {
            return losses::z2s_loss_mean(ad::normalize_rows(p[0]), *labels, ad::normalize_rows(p[1]), cp);
          },
          {random_matrix(rng, n, d), random_matrix(rng, C, d)}};
}

Instance make_s2s(Rng& rng) {
  const std::size_t C = 4, d = 3;
  const auto cp = random_cp(rng);
  return {[=](ad::Tape&, std::span<const ad::Var> p) {
            return losses::s2s_loss(ad::normalize_rows(p[0]), ad::normalize_rows(p[1]), cp);
          },
          {random_matrix(rng, C, d), random_matrix(rng, C, d)}};
}

std::shared_ptr<model::ModelParams> tiny_model(Rng& rng, std::size_t C) {
  model::ModelConfig mc;
  mc.d_x = 3;
  mc.hidden = {5};
  mc.d_v = 4;
  mc.d_s = 3;
  mc.num_classes = C;
  return std::make_shared<model::ModelParams>(model::init_params(mc, rng));
}

Instance make_s2z(Rng& rng) {
  const std::size_t C = 4;
  auto params = tiny_model(rng, C);
  auto table = std::make_shared<Matrix>(SemanticTable::normalized(random_matrix(rng, C, 3)).matrix());
  const auto cp = random_cp(rng);
  std::vector<Matrix> blocks = params->blocks();
  const std::size_t nb = blocks.size();
  Matrix v_hat = random_matrix(rng, C, 4);
  for (double& v : v_hat.values()) v = std::abs(v);
  blocks.push_back(v_hat);
  return {[=](ad::Tape& t, std::span<const ad::Var> p) {
            model::Bound m(*params, p.first(nb), model::Mode::train);
            return losses::s2z_loss(m, p[nb], t.constant(*table), cp);
          },
          blocks};
}

Instance make_aug(Rng& rng, losses::AugDenominator variant) {
  const std::size_t C = 4, d = 3, n = 5;
  auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(rng, n, C));
  auto sigma = std::make_shared<std::vector<Matrix>>();
  for (std::size_t c = 0; c < C; ++c) sigma->push_back(random_psd(rng, d));
  const double lambda = rng.uniform(0.5, 5.0);
  return {[=](ad::Tape&, std::span<const ad::Var> p) {
            return losses::aug_loss_mean(p[0], *labels, p[1], p[2], *sigma, lambda, variant);
          },
          {random_matrix(rng, n, d), random_matrix(rng, C, d, 0.5), random_matrix(rng, 1, C)}};
}

/// The complete meta-train objective on a tiny model with populated banks.
Instance make_mtr(Rng& rng) {
  const std::size_t C = 4, K = 2, B = 3;
  struct Fixture {
    std::shared_ptr<model::ModelParams> params;
    SemanticTable table;
    losses::DomainClassCounts counts;
    banks::PrototypeBank bank;
    std::vector<Matrix> sigma;
    meta::TrainConfig cfg;
    data::Batch batch;
    meta::LossContext ctx;
  };
  auto f = std::make_shared<Fixture>();
  f->params = tiny_model(rng, C);
  f->table = SemanticTable::normalized(random_matrix(rng, C, 3));
  std::vector<long> raw{5, 3, 0, 1, 4, 0, 2, 2};
  f->counts = losses::DomainClassCounts(K, C, raw);
  f->bank = banks::PrototypeBank::from_counts(f->counts, 4);
  for (std::size_t d = 0; d < K; ++d)
    for (std::size_t c : f->bank.present(d)) {
      Matrix v = random_matrix(rng, 1, 4);
      for (double& x : v.values()) x = std::abs(x);
      f->bank.prototypes(d).set_row(c, v.row(0));
    }
  for (std::size_t c = 0; c < C; ++c) f->sigma.push_back(random_psd(rng, 4));
  f->cfg.cp = random_cp(rng);
  f->cfg.w1 = f->cfg.w2 = f->cfg.w3 = f->cfg.w4 = 0.5;
  f->batch.x = random_matrix(rng, K * B, 3);
  for (std::size_t d = 0; d < K; ++d)
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t y;
      do y = rng.index(C);
      while (!f->counts.present(d, y));
      f->batch.labels.push_back(y);
      f->batch.domains.push_back(d);
    }
  f->ctx.table = &f->table;
  f->ctx.counts = &f->counts;
  f->ctx.bank = &f->bank;
  f->ctx.mtr_domains = {0, 1};
  f->ctx.slots = {0, 1};
  f->ctx.sigma_prime = &f->sigma;
  f->ctx.cfg = &f->cfg;
  LossFn inner = meta::meta_train_objective(*f->params, f->batch, f->ctx);
  return {[f, inner](ad::Tape& t, std::span<const ad::Var> p) { return inner(t, p); }, f->params->blocks()};
}

const std::vector<std::pair<std::string, Maker>>& registry() {
  static const std::vector<std::pair<std::string, Maker>> r{
      {"dc_loss", make_dc},
      {"cross_entropy", make_ce},
      {"z2s_loss", make_z2s},
      {"s2s_loss", make_s2s},
      {"s2z_loss", make_s2z},
      {"aug_loss", [](Rng& g) { return make_aug(g, losses::AugDenominator::derivation); }},
      {"aug_loss_as_printed", [](Rng& g) { return make_aug(g, losses::AugDenominator::as_printed); }},
      {"meta_train_objective", make_mtr},
  };
  return r;
}

/// Distance of the point from the nearest ReLU kink, measured on parameter-dependent paths.
double kink_margin(const Instance& inst) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Matrix& p : inst.params) vars.push_back(tape.parameter(p));
  inst.loss(tape, vars);
  return tape.kink_margin();
}

// Central differences straddling a kink are meaningless; such points are redrawn.
constexpr double kMinKinkMargin = 1e-3;

}  // namespace

std::vector<std::string> check_names() {
  std::vector<std::string> out;
  for (const auto& [name, _] : registry()) out.push_back(name);
  return out;
}

std::vector<Check> run(const Options& opts) {
  std::vector<Check> out;
  Rng root(opts.seed);
  std::uint64_t stream = 0;
  for (const auto& [name, make] : registry()) {
    Rng rng = root.split(++stream);
    Check c{name, 0.0, opts.points, true};
    for (std::size_t p = 0; p < opts.points; ++p) {
      Instance inst = make(rng);
      while (kink_margin(inst) < kMinKinkMargin) inst = make(rng);
      GradResult analytic = grad(inst.loss, inst.params);
      if (name == opts.inject_fault)
        for (Matrix& g : analytic.grads) g *= -1.0;
      const GradResult numeric = fd_grad(inst.loss, inst.params, opts.eps);
      c.max_rel_err = std::max(c.max_rel_err, max_relative_error(analytic, numeric, opts.floor));
    }
    c.pass = c.max_rel_err < opts.tolerance;
    out.push_back(c);
  }
  return out;
}

}  // namespace ltds::gradsuite
