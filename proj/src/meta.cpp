#include "ltds/meta.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "ltds/error.hpp"

namespace ltds::meta {

const char* to_string(MetaMode m) { return m == MetaMode::fd_exact ? "fd_exact" : "first_order"; }

MetaMode meta_mode_from_string(const std::string& s) {
  if (s == "first_order") return MetaMode::first_order;
  if (s == "fd_exact") return MetaMode::fd_exact;
  throw ConfigError("meta_mode", "expected first_order or fd_exact, got '" + s + "'");
}

Ablation Ablation::row(char id) {
  Ablation a;
  auto only = [](bool dc, bool z2s, bool s2s, bool s2z, bool aug, bool meta) {
    Ablation r;
    r.use_dc = dc;
    r.use_z2s = z2s;
    r.use_s2s = s2s;
    r.use_s2z = s2z;
    r.use_aug = aug;
    r.use_meta = meta;
    return r;
  };
  switch (id) {
    case 'a': return only(false, false, false, false, false, false);
    case 'b': return only(true, false, false, false, false, false);
    case 'c': return only(false, false, false, false, false, true);
    case 'd': return only(true, false, false, false, false, true);
    case 'e': return only(true, true, false, false, false, false);
    case 'f': return only(true, true, true, false, false, false);
    case 'g': return only(true, true, true, true, false, false);
    case 'h': return only(true, false, false, false, true, false);
    case 'i': return only(true, true, true, true, true, false);
    case 'j': return a;
    case 'k': a.single_prototype = true; return a;
    case 'l': a.unweighted_blend = true; return a;
    default: break;
  }
  throw ConfigError("ablation", std::string("unknown row '") + id + "' (expected a-l)");
}

Ablation Ablation::from_name(const std::string& name) {
  std::string s = name;
  if (s.rfind("row_", 0) == 0) s = s.substr(4);
  if (s.size() != 1) throw ConfigError("ablation", "unknown row '" + name + "' (expected a-l)");
  return row(s[0]);
}

void TrainConfig::validate(std::size_t num_train_domains) const {
  for (auto [v, name] : {std::pair{beta1, "beta1"}, {beta2, "beta2"}, {w1, "w1"}, {w2, "w2"}, {w3, "w3"},
                         {w4, "w4"}, {w_mte, "w_mte"}, {lr_decay, "lr_decay"}})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be finite and >= 0");
  if (t_max < 1) throw ConfigError("t_max", "must be >= 1");
  if (t_sigma > t_max) throw ConfigError("t_sigma", "must not exceed t_max");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(prototype_ema > 0.0 && prototype_ema <= 1.0)) throw ConfigError("prototype_ema", "must be in (0, 1]");
  if (!(fd_eps > 0.0 && fd_eps <= 1e-2)) throw ConfigError("fd_eps", "must be in (0, 1e-2]");
  for (double m : lr_milestones)
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("lr_milestones", "fractions must lie in [0, 1]");
  cp.validate();
  if (!(ap.lambda >= 0.0)) throw ConfigError("lambda", "must be >= 0");
  if (num_train_domains == 0) throw ConfigError("data", "no training domains");
  if (ablation.use_meta && (mte_size < 1 || mte_size >= num_train_domains))
    throw ConfigError("mte_size", "must satisfy 1 <= mte_size < number of training domains (" +
                                      std::to_string(num_train_domains) + ")");
}

double TrainConfig::beta2_at(std::size_t step) const {
  double lr = beta2;
  const double total = static_cast<double>(total_steps());
  for (double m : lr_milestones)
    if (static_cast<double>(step) >= std::floor(m * total)) lr *= lr_decay;
  return lr;
}

std::string to_jsonl(const StepReport& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["L_Cls"] = r.mtr.cls;
  j["L_Z2S"] = r.mtr.z2s;
  j["L_S2S"] = r.mtr.s2s;
  j["L_S2Z"] = r.mtr.s2z;
  j["L_Aug"] = r.mtr.aug;
  j["L_mtr"] = r.mtr.total;
  j["L_MCls"] = r.mte.cls;
  j["L_MZ2S"] = r.mte.z2s;
  j["L_MAug"] = r.mte.aug;
  j["L_mte"] = r.mte.total;
  j["mtr_domains"] = r.mtr_domains;
  j["mte_domains"] = r.mte_domains;
  j["grad_norm_mtr"] = r.grad_norm_mtr;
  j["grad_norm_mte"] = r.grad_norm_mte;
  j["grad_norm"] = r.grad_norm;
  j["beta2"] = r.beta2;
  j["mte_samples_read"] = r.mte_samples_read;
  return j.dump();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_domains(std::span<const std::size_t> domains,
                                                                             std::size_t mte_size, Rng& rng) {
  if (mte_size < 1 || mte_size >= domains.size())
    throw ConfigError("mte_size", "must satisfy 1 <= mte_size < number of training domains");
  std::vector<std::size_t> all(domains.begin(), domains.end());
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> mte(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(mte_size));
  std::vector<std::size_t> mtr(all.begin() + static_cast<std::ptrdiff_t>(mte_size), all.end());
  std::sort(mte.begin(), mte.end());
  std::sort(mtr.begin(), mtr.end());
  return {std::move(mtr), std::move(mte)};
}

namespace {

double norm(std::span<const Matrix> blocks) {
  double s = 0.0;
  for (const Matrix& m : blocks)
    for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

ad::Var mean_of(const std::vector<ad::Var>& xs) {
  std::vector<std::pair<double, ad::Var>> t;
  for (const ad::Var& x : xs) t.emplace_back(1.0 / static_cast<double>(xs.size()), x);
  return ad::weighted_sum(t);
}

void require_context(const LossContext& ctx) {
  if (!ctx.table || !ctx.counts || !ctx.cfg) throw ConstructionError("LossContext: table, counts and cfg are required");
}

}  // namespace

LossFn meta_train_objective(const model::ModelParams& shape, const data::Batch& batch, const LossContext& ctx,
                            MtrTerms* terms, model::MomentLog* log) {
  require_context(ctx);
  return [&shape, &batch, &ctx, terms, log](ad::Tape& tape, std::span<const ad::Var> leaves) {
    const TrainConfig& cfg = *ctx.cfg;
    const Ablation& ab = cfg.ablation;
    if (batch.labels.empty()) throw InputError("meta_train_losses: empty batch");
    model::Bound m(shape, leaves, model::Mode::train, log);
    ad::Var z = m.features(tape.constant(batch.x));
    ad::Var logits = m.logits(z);
    MtrTerms t;
    ad::Var cls = ab.use_dc ? losses::dc_loss_mean(logits, batch.labels, batch.domains, *ctx.counts)
                            : losses::ce_loss_mean(logits, batch.labels);
    t.cls = cls.scalar();
    std::vector<std::pair<double, ad::Var>> parts{{1.0, cls}};
    ad::Var table = tape.constant(ctx.table->matrix());

    if (ab.use_z2s && cfg.w1 > 0.0) {
      ad::Var z2s = losses::z2s_loss_mean(m.encode(z), batch.labels, table, cfg.cp);
      t.z2s = z2s.scalar();
      parts.emplace_back(cfg.w1, z2s);
    }

    const bool want_s2s = ab.use_s2s && cfg.w2 > 0.0;
    const bool want_s2z = ab.use_s2z && cfg.w3 > 0.0;
    if ((want_s2s || want_s2z) && ctx.bank && !ctx.slots.empty()) {
      std::vector<ad::Var> s_hat;
      for (std::size_t slot : ctx.slots) s_hat.push_back(banks::complete_semantic(m, *ctx.bank, table, slot));
      if (want_s2s) {
        const std::size_t n = s_hat.size();
        std::vector<std::pair<double, ad::Var>> s2s_parts;
        if (n > 1) {
          const double w = 1.0 / static_cast<double>(n * (n - 1));
          for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b)
              if (a != b) s2s_parts.emplace_back(w, losses::s2s_loss(s_hat[a], s_hat[b], cfg.cp));
        }
        for (std::size_t a = 0; a < n; ++a)
          s2s_parts.emplace_back(1.0 / static_cast<double>(n), losses::s2s_loss(s_hat[a], table, cfg.cp));
        ad::Var s2s = ad::weighted_sum(s2s_parts);
        t.s2s = s2s.scalar();
        parts.emplace_back(cfg.w2, s2s);
      }
      if (want_s2z) {
        std::vector<ad::Var> per;
        for (const ad::Var& s : s_hat) per.push_back(losses::s2z_loss(m, m.decode(s), table, cfg.cp));
        ad::Var s2z = mean_of(per);
        t.s2z = s2z.scalar();
        parts.emplace_back(cfg.w3, s2z);
      }
    }

    if (ab.use_aug && ctx.sigma_prime && cfg.w4 > 0.0) {
      ad::Var aug = losses::aug_loss_mean(z, batch.labels, m.classifier_w(), m.classifier_b(), *ctx.sigma_prime,
                                          cfg.ap.lambda, cfg.ap.variant);
      t.aug = aug.scalar();
      parts.emplace_back(cfg.w4, aug);
    }

    ad::Var total = ad::weighted_sum(parts);
    t.total = total.scalar();
    if (terms) *terms = t;
    return total;
  };
}

LossFn meta_test_objective(const model::ModelParams& shape, const data::Batch& batch, const LossContext& ctx,
                           MteTerms* terms) {
  require_context(ctx);
  return [&shape, &batch, &ctx, terms](ad::Tape& tape, std::span<const ad::Var> leaves) {
    const TrainConfig& cfg = *ctx.cfg;
    const Ablation& ab = cfg.ablation;
    if (batch.labels.empty()) throw InputError("meta_test_losses: empty batch");
    model::Bound m(shape, leaves, model::Mode::train);
    ad::Var z = m.features(tape.constant(batch.x));
    ad::Var logits = m.logits(z);
    MteTerms t;
    ad::Var cls = ab.use_dc ? losses::dc_loss_mean(logits, batch.labels, batch.domains, *ctx.counts)
                            : losses::ce_loss_mean(logits, batch.labels);
    t.cls = cls.scalar();
    std::vector<std::pair<double, ad::Var>> parts{{1.0, cls}};

    if (ab.use_z2s && cfg.w1 > 0.0) {
      ad::Var table = tape.constant(ctx.table->matrix());
      ad::Var emb = m.encode(z);
      std::vector<std::pair<double, ad::Var>> z2s_parts{{1.0, losses::z2s_loss_mean(emb, batch.labels, table, cfg.cp)}};
      if (ctx.bank && !ctx.slots.empty()) {
        const double w = 1.0 / static_cast<double>(ctx.slots.size());
        for (std::size_t slot : ctx.slots) {
          ad::Var s_hat = banks::complete_semantic(m, *ctx.bank, table, slot);
          z2s_parts.emplace_back(w, losses::z2s_loss_mean(emb, batch.labels, s_hat, cfg.cp));
        }
      }
      ad::Var z2s = ad::weighted_sum(z2s_parts);
      t.z2s = z2s.scalar();
      parts.emplace_back(cfg.w1, z2s);
    }

    if (ab.use_aug && ctx.sigma_prime && cfg.w4 > 0.0) {
      ad::Var aug = losses::aug_loss_mean(z, batch.labels, m.classifier_w(), m.classifier_b(), *ctx.sigma_prime,
                                          cfg.ap.lambda, cfg.ap.variant);
      t.aug = aug.scalar();
      parts.emplace_back(cfg.w4, aug);
    }

    ad::Var total = ad::weighted_sum(parts);
    t.total = total.scalar();
    if (terms) *terms = t;
    return total;
  };
}

MtrResult meta_train_losses(const model::ModelParams& params, const data::Batch& batch, const LossContext& ctx) {
  MtrResult r;
  const auto blocks = params.blocks();
  r.grad = grad(meta_train_objective(params, batch, ctx, &r.terms, &r.moments), blocks);
  return r;
}

MteResult meta_test_losses(const model::ModelParams& params_prime, const data::Batch& batch, const LossContext& ctx) {
  for (std::size_t d : batch.domains)
    if (std::find(ctx.mtr_domains.begin(), ctx.mtr_domains.end(), d) != ctx.mtr_domains.end())
      throw ProtocolError("meta_test_losses: domain " + std::to_string(d) + " is also a meta-train domain");
  MteResult r;
  const auto blocks = params_prime.blocks();
  r.grad = grad(meta_test_objective(params_prime, batch, ctx, &r.terms), blocks);
  return r;
}

model::ModelParams inner_step(const model::ModelParams& params, const GradResult& grads, double beta1) {
  return model::apply_step(params, grads, beta1);
}

std::vector<Matrix> first_order_meta_gradient(const GradResult& mtr, const GradResult* mte, double w_mte) {
  std::vector<Matrix> g = mtr.grads;
  if (mte && w_mte != 0.0) {
    if (mte->grads.size() != g.size()) throw InputError("first_order_meta_gradient: block count mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i].add_scaled(mte->grads[i], w_mte);
  }
  return g;
}

std::vector<Matrix> fd_meta_gradient(const model::ModelParams& params, const data::Batch& mtr_batch,
                                     const data::Batch& mte_batch, const LossContext& ctx) {
  require_context(ctx);
  const TrainConfig& cfg = *ctx.cfg;
  if (params.parameter_count() > kFdExactMaxParams)
    throw ConfigError("meta_mode", "fd_exact needs at most " + std::to_string(kFdExactMaxParams) +
                                       " parameters, model has " + std::to_string(params.parameter_count()));
  auto objective = [&](const std::vector<Matrix>& b) {
    model::ModelParams p = params;
    p.assign(b);
    GradResult g = grad(meta_train_objective(p, mtr_batch, ctx), b);
    double v = g.value;
    if (cfg.w_mte != 0.0) {
      model::ModelParams pp = inner_step(p, g, cfg.beta1);
      v += cfg.w_mte * evaluate(meta_test_objective(pp, mte_batch, ctx), pp.blocks());
    }
    return v;
  };
  std::vector<Matrix> blocks = params.blocks();
  std::vector<Matrix> out;
  const double eps = cfg.fd_eps;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    Matrix g(blocks[bi].rows(), blocks[bi].cols());
    for (std::size_t k = 0; k < blocks[bi].size(); ++k) {
      const double orig = blocks[bi][k];
      blocks[bi][k] = orig + eps;
      const double up = objective(blocks);
      blocks[bi][k] = orig - eps;
      const double down = objective(blocks);
      blocks[bi][k] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw InputError("fd_meta_gradient: non-finite objective");
      g[k] = (up - down) / (2.0 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

model::ModelParams outer_step(const model::ModelParams& params, std::span<const Matrix> meta_grad, double beta2) {
  return model::apply_step(params, meta_grad, beta2);
}

TrainState init_state(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& cfg) {
  if (mcfg.d_x != ds.d_x) throw ConfigError("model.d_x", "does not match the dataset feature width");
  if (mcfg.num_classes != ds.num_classes) throw ConfigError("model.num_classes", "does not match the dataset");
  if (mcfg.d_s != ds.semantic.dim()) throw ConfigError("model.d_s", "does not match the embedding width");
  const auto domains = ds.train_domains();
  cfg.validate(domains.size());
  if (cfg.ablation.use_aug) cfg.ap.validate(ds.num_classes);
  Rng root(cfg.seed);
  Rng init = root.split(1);
  TrainState s;
  s.params = model::init_params(mcfg, init);
  if (cfg.meta_mode == MetaMode::fd_exact && s.params.parameter_count() > kFdExactMaxParams)
    throw ConfigError("meta_mode", "fd_exact needs at most " + std::to_string(kFdExactMaxParams) + " parameters");
  s.prototypes = cfg.ablation.single_prototype
                     ? banks::PrototypeBank::single(ds.counts, domains, mcfg.d_v, cfg.prototype_ema)
                     : banks::PrototypeBank::from_counts(ds.counts, mcfg.d_v, cfg.prototype_ema);
  s.covariance = banks::CovarianceBank(ds.num_classes, mcfg.d_v);
  s.rng = root.split(2);
  return s;
}

StepReport train_step(TrainState& state, const data::Dataset& ds, const TrainConfig& cfg) {
  const Ablation& ab = cfg.ablation;
  StepReport rep;
  rep.step = state.step;
  rep.beta2 = cfg.beta2_at(state.step);

  const auto domains = ds.train_domains();
  std::vector<std::size_t> mtr, mte;
  if (ab.use_meta) std::tie(mtr, mte) = split_domains(domains, cfg.mte_size, state.rng);
  else mtr = domains;
  rep.mtr_domains = mtr;
  rep.mte_domains = mte;

  std::vector<data::Batch> parts;
  for (std::size_t d : mtr) parts.push_back(data::sample_batch(ds, d, cfg.batch_size, state.rng));
  const data::Batch batch = data::concat(parts);

  // Bank updates see detached features at the current parameters.
  const Matrix z = model::forward_features(state.params, batch.x);
  if (ab.single_prototype) {
    banks::update_prototypes(state.prototypes, 0, z, batch.labels);
  } else {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t n = parts[p].labels.size();
      Matrix zd(n, z.cols());
      for (std::size_t i = 0; i < n; ++i) zd.set_row(i, z.row(offset + i));
      banks::update_prototypes(state.prototypes, mtr[p], zd, parts[p].labels);
      offset += n;
    }
  }
  std::vector<Matrix> sigma_prime;
  const bool aug_active = ab.use_aug && state.step >= cfg.sigma_step();
  if (aug_active) {
    banks::update_covariance(state.covariance, z, batch.labels);
    sigma_prime = banks::blend_covariance(state.covariance, ds.semantic, cfg.ap.k, !ab.unweighted_blend).sigma;
  }

  LossContext ctx;
  ctx.table = &ds.semantic;
  ctx.counts = &ds.counts;
  ctx.bank = &state.prototypes;
  ctx.mtr_domains = mtr;
  ctx.slots = ab.single_prototype ? std::vector<std::size_t>{0} : mtr;
  ctx.sigma_prime = aug_active ? &sigma_prime : nullptr;
  ctx.cfg = &cfg;

  MtrResult r = meta_train_losses(state.params, batch, ctx);
  rep.mtr = r.terms;
  rep.grad_norm_mtr = norm(r.grad.grads);

  std::vector<Matrix> g;
  if (ab.use_meta && cfg.w_mte > 0.0) {
    std::vector<data::Batch> mparts;
    for (std::size_t d : mte) mparts.push_back(data::sample_batch(ds, d, cfg.batch_size, state.rng));
    const data::Batch mbatch = data::concat(mparts);
    rep.mte_samples_read = mbatch.labels.size();
    const model::ModelParams prime = inner_step(state.params, r.grad, cfg.beta1);
    MteResult t = meta_test_losses(prime, mbatch, ctx);
    rep.mte = t.terms;
    rep.grad_norm_mte = norm(t.grad.grads);
    g = cfg.meta_mode == MetaMode::fd_exact ? fd_meta_gradient(state.params, batch, mbatch, ctx)
                                            : first_order_meta_gradient(r.grad, &t.grad, cfg.w_mte);
  } else {
    g = r.grad.grads;
  }
  rep.grad_norm = norm(g);
  state.params = outer_step(state.params, g, rep.beta2);
  model::update_running_stats(state.params, r.moments);
  ++state.step;
  return rep;
}

double validation_accuracy(const model::ModelParams& params, const data::Dataset& ds) {
  const auto idx = ds.indices(data::Split::val);
  if (idx.empty()) return 0.0;
  const data::Batch b = data::gather(ds, idx);
  const Matrix logits = model::forward_logits(params, model::forward_features(params, b.x));
  const auto known = ds.known_classes();
  long hit = 0, total = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (!known[b.labels[i]]) continue;
    ++total;
    std::size_t best = 0;
    bool any = false;
    for (std::size_t c = 0; c < logits.cols(); ++c)
      if (known[c] && (!any || logits(i, c) > logits(i, best))) {
        best = c;
        any = true;
      }
    hit += best == b.labels[i];
  }
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

RunResult run(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& cfg,
              const RunOptions& opts) {
  RunResult out;
  if (opts.resume) {
    cfg.validate(ds.train_domains().size());
    out.state = *opts.resume;
  } else {
    out.state = init_state(ds, mcfg, cfg);
  }
  const std::size_t total = cfg.total_steps();
  while (out.state.step < total) {
    StepReport rep = train_step(out.state, ds, cfg);
    if (opts.on_step) opts.on_step(rep);
    out.reports.push_back(std::move(rep));
    if (cfg.eval_every > 0 && out.state.step % cfg.eval_every == 0)
      out.history.push_back({out.state.step, validation_accuracy(out.state.params, ds)});
    if (opts.after_step) opts.after_step(out.state);
  }
  if (out.history.empty() || out.history.back().step != out.state.step)
    out.history.push_back({out.state.step, validation_accuracy(out.state.params, ds)});
  return out;
}

}  // namespace ltds::meta
