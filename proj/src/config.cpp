#include "ltds/config.hpp"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "ltds/error.hpp"
#include "ltds/rng.hpp"

namespace ltds {

using nlohmann::json;

namespace {

/// Reads keys from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "config" : prefix_, "expected a JSON object");
  }
  ~Section() = default;

  template <class T>
  void read(const char* key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      dst = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name(key), std::string("wrong type: ") + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(name(it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

json ablation_json(const meta::Ablation& a) {
  return {{"use_dc", a.use_dc},       {"use_z2s", a.use_z2s},   {"use_s2s", a.use_s2s},
          {"use_s2z", a.use_s2z},     {"use_aug", a.use_aug},   {"use_meta", a.use_meta},
          {"single_prototype", a.single_prototype}, {"unweighted_blend", a.unweighted_blend}};
}

meta::Ablation parse_ablation(const json& j) {
  if (j.is_string()) return meta::Ablation::from_name(j.get<std::string>());
  meta::Ablation a;
  Section s(j, "train.ablation");
  s.read("use_dc", a.use_dc);
  s.read("use_z2s", a.use_z2s);
  s.read("use_s2s", a.use_s2s);
  s.read("use_s2z", a.use_s2z);
  s.read("use_aug", a.use_aug);
  s.read("use_meta", a.use_meta);
  s.read("single_prototype", a.single_prototype);
  s.read("unweighted_blend", a.unweighted_blend);
  s.finish();
  return a;
}

}  // namespace

void RunConfig::finalize() {
  Rng root(seed);
  data.seed = root.split(101).next_u64();
  train.seed = root.split(102).next_u64();
  model.d_x = data.d_x;
  model.d_s = data.d_s;
  model.num_classes = data.num_classes;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  if (model.d_x != data.d_x || model.d_s != data.d_s || model.num_classes != data.num_classes)
    throw ConfigError("model", "dimensions disagree with the data section");
  train.validate(data.train_domains);
  if (train.ablation.use_aug) train.ap.validate(data.num_classes);
  if (heldout_domain < -1 || heldout_domain > static_cast<long>(data.train_domains))
    throw ConfigError("eval.heldout_domain", "out of range");
  if (!(eval.threshold >= 0.0)) throw ConfigError("eval.threshold", "must be >= 0");
  if (eval.auto_threshold && eval.grid.empty()) throw ConfigError("eval.threshold_grid", "must not be empty");
  for (double t : eval.grid)
    if (eval.confidence == eval::Confidence::max_softmax && !(t >= 0.0 && t <= 1.0)) throw ConfigError("eval.threshold_grid", "values must lie in [0, 1]");
  for (char r : ablate.rows) meta::Ablation::row(r);
  if (ablate.seeds < 1) throw ConfigError("ablate.seeds", "must be >= 1");
}

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section top(root, "");
  top.read("seed", cfg.seed);
  top.read("checkpoint_every", cfg.checkpoint_every);
  if (const json* j = top.child("data")) {
    Section s(*j, "data");
    auto& d = cfg.data;
    s.read("num_classes", d.num_classes);
    s.read("train_domains", d.train_domains);
    s.read("d_x", d.d_x);
    s.read("d_s", d.d_s);
    s.read("n_max", d.n_max);
    s.read("n_min", d.n_min);
    s.read("curve_scale", d.curve_scale);
    s.read("groups", d.groups);
    s.read("anchor_spread", d.anchor_spread);
    s.read("group_spread", d.group_spread);
    s.read("noise_scale", d.noise_scale);
    s.read("anisotropy", d.anisotropy);
    s.read("semantic_noise", d.semantic_noise);
    s.read("transform_strength", d.transform_strength);
    s.read("shift_scale", d.shift_scale);
    s.read("tail_domain_budget", d.tail_domain_budget);
    s.read("open_classes", d.open_classes);
    s.read("val_per_class", d.val_per_class);
    s.read("test_per_class", d.test_per_class);
    s.finish();
  }
  if (const json* j = top.child("model")) {
    Section s(*j, "model");
    auto& m = cfg.model;
    s.read("hidden", m.hidden);
    s.read("d_v", m.d_v);
    s.read("use_batch_standardization", m.use_batch_standardization);
    s.read("bn_eps", m.bn_eps);
    s.read("bn_momentum", m.bn_momentum);
    s.finish();
  }
  if (const json* j = top.child("train")) {
    Section s(*j, "train");
    auto& t = cfg.train;
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("w1", t.w1);
    s.read("w2", t.w2);
    s.read("w3", t.w3);
    s.read("w4", t.w4);
    s.read("w_mte", t.w_mte);
    s.read("t_max", t.t_max);
    s.read("t_sigma", t.t_sigma);
    s.read("steps_per_epoch", t.steps_per_epoch);
    s.read("batch_size", t.batch_size);
    s.read("alpha", t.cp.alpha);
    s.read("tau", t.cp.tau);
    s.read("lambda", t.ap.lambda);
    s.read("k", t.ap.k);
    std::string variant = "derivation";
    s.read("aug_denominator_variant", variant);
    if (variant == "derivation") t.ap.variant = losses::AugDenominator::derivation;
    else if (variant == "as_printed") t.ap.variant = losses::AugDenominator::as_printed;
    else throw ConfigError("train.aug_denominator_variant", "expected derivation or as_printed");
    std::string mode = meta::to_string(t.meta_mode);
    s.read("meta_mode", mode);
    t.meta_mode = meta::meta_mode_from_string(mode);
    if (const json* a = s.child("ablation")) t.ablation = parse_ablation(*a);
    s.read("mte_size", t.mte_size);
    s.read("prototype_ema", t.prototype_ema);
    s.read("lr_milestones", t.lr_milestones);
    s.read("lr_decay", t.lr_decay);
    s.read("eval_every", t.eval_every);
    s.read("fd_eps", t.fd_eps);
    s.finish();
  }
  if (const json* j = top.child("eval")) {
    Section s(*j, "eval");
    if (const json* t = s.child("threshold")) {
      if (t->is_string() && t->get<std::string>() == "auto") cfg.eval.auto_threshold = true;
      else if (t->is_number()) cfg.eval.threshold = t->get<double>();
      else throw ConfigError("eval.threshold", "expected a number or \"auto\"");
    }
    s.read("threshold_grid", cfg.eval.grid);
    s.read("pooled_acc", cfg.eval.pooled_acc);
    std::string conf = "max_softmax";
    s.read("confidence", conf);
    if (conf == "max_softmax") cfg.eval.confidence = eval::Confidence::max_softmax;
    else if (conf == "max_logit") cfg.eval.confidence = eval::Confidence::max_logit;
    else throw ConfigError("eval.confidence", "expected max_softmax or max_logit");
    s.read("heldout_domain", cfg.heldout_domain);
    s.finish();
  }
  if (const json* j = top.child("ablate")) {
    Section s(*j, "ablate");
    s.read("rows", cfg.ablate.rows);
    s.read("seeds", cfg.ablate.seeds);
    s.read("threads", cfg.ablate.threads);
    s.finish();
  }
  top.finish();
  cfg.finalize();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

std::string dump_config(const RunConfig& c) {
  const auto& d = c.data;
  const auto& m = c.model;
  const auto& t = c.train;
  json j;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["data"] = {{"num_classes", d.num_classes},
               {"train_domains", d.train_domains},
               {"d_x", d.d_x},
               {"d_s", d.d_s},
               {"n_max", d.n_max},
               {"n_min", d.n_min},
               {"curve_scale", d.curve_scale},
               {"groups", d.groups},
               {"anchor_spread", d.anchor_spread},
               {"group_spread", d.group_spread},
               {"noise_scale", d.noise_scale},
               {"anisotropy", d.anisotropy},
               {"semantic_noise", d.semantic_noise},
               {"transform_strength", d.transform_strength},
               {"shift_scale", d.shift_scale},
               {"tail_domain_budget", d.tail_domain_budget},
               {"open_classes", d.open_classes},
               {"val_per_class", d.val_per_class},
               {"test_per_class", d.test_per_class}};
  j["model"] = {{"hidden", m.hidden},
                {"d_v", m.d_v},
                {"use_batch_standardization", m.use_batch_standardization},
                {"bn_eps", m.bn_eps},
                {"bn_momentum", m.bn_momentum}};
  j["train"] = {{"beta1", t.beta1},
                {"beta2", t.beta2},
                {"w1", t.w1},
                {"w2", t.w2},
                {"w3", t.w3},
                {"w4", t.w4},
                {"w_mte", t.w_mte},
                {"t_max", t.t_max},
                {"t_sigma", t.t_sigma},
                {"steps_per_epoch", t.steps_per_epoch},
                {"batch_size", t.batch_size},
                {"alpha", t.cp.alpha},
                {"tau", t.cp.tau},
                {"lambda", t.ap.lambda},
                {"k", t.ap.k},
                {"aug_denominator_variant",
                 t.ap.variant == losses::AugDenominator::derivation ? "derivation" : "as_printed"},
                {"meta_mode", meta::to_string(t.meta_mode)},
                {"ablation", ablation_json(t.ablation)},
                {"mte_size", t.mte_size},
                {"prototype_ema", t.prototype_ema},
                {"lr_milestones", t.lr_milestones},
                {"lr_decay", t.lr_decay},
                {"eval_every", t.eval_every},
                {"fd_eps", t.fd_eps}};
  j["eval"] = {{"threshold", c.eval.auto_threshold ? json("auto") : json(c.eval.threshold)},
               {"threshold_grid", c.eval.grid},
               {"pooled_acc", c.eval.pooled_acc},
               {"confidence", c.eval.confidence == eval::Confidence::max_softmax ? "max_softmax" : "max_logit"},
               {"heldout_domain", c.heldout_domain}};
  j["ablate"] = {{"rows", c.ablate.rows}, {"seeds", c.ablate.seeds}, {"threads", c.ablate.threads}};
  return j.dump();
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(dump_config(cfg)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace ltds
