#include "ltds/cli.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "ltds/checkpoint.hpp"
#include "ltds/error.hpp"
#include "ltds/gradsuite.hpp"

namespace ltds::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <class F>
int guarded(const char* cmd, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << cmd << ": config error: " << e.what() << '\n';
  } catch (const Error& e) {
    std::cerr << cmd << ": " << to_string(e.kind()) << " error: " << e.what() << '\n';
  } catch (const fs::filesystem_error& e) {
    std::cerr << cmd << ": io error: " << e.what() << '\n';
  }
  return kUsage;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

data::Dataset load_data_dir(const fs::path& dir) {
  const fs::path samples = dir / "dataset.csv";
  const fs::path emb = dir / "embeddings.csv";
  if (!fs::exists(samples) || !fs::exists(emb))
    throw IoError("dataset files not found in " + dir.string() + " (run gen-data first)");
  return data::load_dataset(samples, emb);
}

json report_json(const eval::MetricReport& r) { return json::parse(eval::to_json(r, -1)); }

}  // namespace

RunConfig resolve_config(const fs::path& path, const Overrides& o) {
  RunConfig cfg = load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.ablation) cfg.train.ablation = meta::Ablation::from_name(*o.ablation);
  if (o.threshold) {
    cfg.eval.threshold = *o.threshold;
    cfg.eval.auto_threshold = false;
  }
  if (o.meta_mode) cfg.train.meta_mode = meta::meta_mode_from_string(*o.meta_mode);
  cfg.finalize();
  cfg.validate();
  return cfg;
}

std::size_t heldout_of(const RunConfig& cfg) {
  return cfg.heldout_domain < 0 ? cfg.data.train_domains : static_cast<std::size_t>(cfg.heldout_domain);
}

int cmd_gen_data(const fs::path& config, const fs::path& out, const Overrides& o) {
  return guarded("gen-data", [&] {
    const RunConfig cfg = resolve_config(config, o);
    const data::Dataset ds = data::generate(cfg.data);
    data::save_dataset(ds, out / "dataset.csv");
    data::save_embeddings(ds.semantic, out / "embeddings.csv");
    json m;
    m["seed"] = cfg.seed;
    m["data_seed"] = cfg.data.seed;
    m["config_hash"] = hex64(config_hash(cfg));
    m["dataset_fingerprint"] = hex64(data::fingerprint(ds));
    m["files"] = {"dataset.csv", "embeddings.csv"};
    m["num_samples"] = ds.samples.size();
    write_text(out / "manifest.json", m.dump(2) + "\n");
    std::cout << "wrote " << ds.samples.size() << " samples to " << out.string() << '\n';
    return kOk;
  });
}

int cmd_train(const TrainArgs& args, const Overrides& o) {
  return guarded("train", [&] {
    const RunConfig cfg = resolve_config(args.config, o);
    const data::Dataset ds = load_data_dir(args.data.value_or(args.out));
    const std::uint64_t fp = data::fingerprint(ds);
    const fs::path steps_path = args.out / "steps.jsonl";

    meta::RunOptions ro;
    std::vector<std::string> kept;
    if (args.resume) {
      Checkpoint ck = load_checkpoint(*args.resume);
      if (ck.config_hash != config_hash(cfg))
        throw ProtocolError("checkpoint was written with a different configuration");
      if (ck.dataset_fingerprint != fp) throw ProtocolError("checkpoint was trained on a different dataset");
      std::ifstream in(steps_path);
      std::string line;
      while (kept.size() < ck.state.step && std::getline(in, line)) kept.push_back(line);
      ro.resume = std::move(ck.state);
    }
    fs::create_directories(args.out);
    std::ofstream steps(steps_path, std::ios::binary | std::ios::trunc);
    if (!steps) throw IoError("cannot open " + steps_path.string());
    for (const auto& l : kept) steps << l << '\n';

    meta::TrainConfig run_cfg = cfg.train;
    ro.on_step = [&](const meta::StepReport& r) { steps << meta::to_jsonl(r) << '\n'; };
    ro.after_step = [&](const meta::TrainState& s) {
      if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0)
        save_checkpoint(args.out / ("checkpoint_" + std::to_string(s.step) + ".json"), cfg, fp, s);
    };

    meta::RunResult res;
    if (args.stop_after) {
      // Partial run: step manually so the schedule still sees the full horizon.
      meta::TrainState state = ro.resume ? *ro.resume : meta::init_state(ds, cfg.model, run_cfg);
      run_cfg.validate(ds.train_domains().size());
      while (state.step < std::min(*args.stop_after, run_cfg.total_steps())) {
        ro.on_step(meta::train_step(state, ds, run_cfg));
        ro.after_step(state);
      }
      res.state = std::move(state);
    } else {
      res = meta::run(ds, cfg.model, run_cfg, ro);
    }
    steps.close();
    save_checkpoint(args.out / "checkpoint.json", cfg, fp, res.state);

    const eval::MetricReport rep = eval::evaluate(res.state.params, ds, heldout_of(cfg), cfg.eval);
    json m;
    m["step"] = res.state.step;
    json hist = json::array();
    for (const auto& p : res.history) hist.push_back({{"step", p.step}, {"val_acc", p.val_acc}});
    m["history"] = hist;
    m["final"] = report_json(rep);
    write_text(args.out / "metrics.json", m.dump(2) + "\n");
    std::cout << "step " << res.state.step << "  Acc-U " << rep.acc_u << "  Acc " << rep.acc << "  H " << rep.h
              << '\n';
    return kOk;
  });
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out, const Overrides& o) {
  return guarded("eval", [&] {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const data::Dataset ds = load_data_dir(data_dir);
    if (data::fingerprint(ds) != ck.dataset_fingerprint)
      throw ProtocolError("dataset does not match the checkpoint (fingerprint " +
                          hex64(data::fingerprint(ds)) + " vs " + hex64(ck.dataset_fingerprint) + ")");
    eval::EvalOptions opts = ck.config.eval;
    if (o.threshold) {
      opts.threshold = *o.threshold;
      opts.auto_threshold = false;
    }
    const eval::MetricReport r = eval::evaluate(ck.state.params, ds, heldout_of(ck.config), opts);
    json j;
    j["step"] = ck.state.step;
    j["heldout"] = json::array({report_json(r)});
    j["average"] = {{"acc_u", r.acc_u}, {"acc", r.acc}, {"h", r.h}};
    write_text(out / "eval.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << '\n';
    return kOk;
  });
}

int cmd_gradcheck(double tolerance, const std::string& inject_fault, std::size_t points) {
  return guarded("gradcheck", [&] {
    if (!(tolerance > 0.0)) throw ConfigError("tolerance", "must be > 0");
    const auto names = gradsuite::check_names();
    if (!inject_fault.empty() && std::find(names.begin(), names.end(), inject_fault) == names.end())
      throw ConfigError("inject-fault", "unknown check '" + inject_fault + "'");
    gradsuite::Options opts;
    opts.tolerance = tolerance;
    opts.inject_fault = inject_fault;
    opts.points = points;
    const auto checks = gradsuite::run(opts);
    const gradsuite::Check* worst = nullptr;
    std::printf("%-24s %14s  %s\n", "loss", "max_rel_err", "status");
    for (const auto& c : checks) {
      std::printf("%-24s %14.3e  %s\n", c.name.c_str(), c.max_rel_err, c.pass ? "PASS" : "FAIL");
      if (!c.pass && (!worst || c.max_rel_err > worst->max_rel_err)) worst = &c;
    }
    if (worst) {
      std::printf("worst offender: %s (%.3e > %.1e)\n", worst->name.c_str(), worst->max_rel_err, tolerance);
      return static_cast<int>(kFailure);
    }
    return static_cast<int>(kOk);
  });
}

eval::MetricReport train_and_evaluate(const RunConfig& cfg, const data::Dataset& ds) {
  const meta::RunResult res = meta::run(ds, cfg.model, cfg.train);
  return eval::evaluate(res.state.params, ds, heldout_of(cfg), cfg.eval);
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& rows, std::size_t seeds,
                                      std::size_t threads) {
  for (char r : rows) meta::Ablation::row(r);
  if (seeds < 1) throw ConfigError("ablate.seeds", "must be >= 1");
  std::vector<data::Dataset> datasets;
  std::vector<RunConfig> seed_cfgs;
  for (std::size_t s = 0; s < seeds; ++s) {
    RunConfig c = cfg;
    c.seed = cfg.seed + s;
    c.finalize();
    datasets.push_back(data::generate(c.data));
    seed_cfgs.push_back(c);
  }
  std::vector<AblationRow> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out[r].id = rows[r];
    out[r].per_seed.resize(seeds);
  }
  const std::size_t jobs = rows.size() * seeds;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      const std::size_t r = j / seeds, s = j % seeds;
      RunConfig c = seed_cfgs[s];
      c.train.ablation = meta::Ablation::row(rows[r]);
      out[r].per_seed[s] = train_and_evaluate(c, datasets[s]);
    }
  };
  std::size_t n = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  n = std::min(n, jobs);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& row : out) {
    for (const auto& m : row.per_seed) {
      row.acc_u += m.acc_u / static_cast<double>(seeds);
      row.acc += m.acc / static_cast<double>(seeds);
      row.h += m.h / static_cast<double>(seeds);
    }
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "index,L_dc,CE,L_Z2S,L_S2S,L_S2Z,L_Aug,Meta,single_prototype,unweighted_blend,acc_u,acc,h\n";
  for (const auto& r : rows) {
    const meta::Ablation a = meta::Ablation::row(r.id);
    os << r.id << ',' << a.use_dc << ',' << !a.use_dc << ',' << a.use_z2s << ',' << a.use_s2s << ',' << a.use_s2z
       << ',' << a.use_aug << ',' << a.use_meta << ',' << a.single_prototype << ',' << a.unweighted_blend << ','
       << data::format_double(r.acc_u) << ',' << data::format_double(r.acc) << ',' << data::format_double(r.h)
       << '\n';
  }
  return os.str();
}

int cmd_ablate(const fs::path& config, const fs::path& out, const Overrides& o, const std::optional<std::string>& rows,
               const std::optional<std::size_t>& seeds) {
  return guarded("ablate", [&] {
    const RunConfig cfg = resolve_config(config, o);
    const auto table = run_ablation(cfg, rows.value_or(cfg.ablate.rows), seeds.value_or(cfg.ablate.seeds),
                                    cfg.ablate.threads);
    const std::string csv = ablation_csv(table);
    write_text(out / "ablation.csv", csv);
    std::cout << csv;
    return kOk;
  });
}

}  // namespace ltds::cli
