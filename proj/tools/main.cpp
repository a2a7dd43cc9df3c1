#include <CLI11.hpp>
#include <iostream>

#include "ltds/cli.hpp"

namespace fs = std::filesystem;
using namespace ltds::cli;

int main(int argc, char** argv) {
  CLI::App app{"Long-tailed domain-shift training on synthetic multi-domain data"};
  app.require_subcommand(1);

  std::string config = "configs/desk.json";
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablation, meta_mode;
  std::optional<double> threshold;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "root seed (overrides the config)");
    sub->add_option("--out", out, "output directory");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--ablation", ablation, "ablation row a..l (or row_a..row_l)");
    sub->add_option("--meta-mode", meta_mode, "first_order or fd_exact")
        ->check(CLI::IsMember({"first_order", "fd_exact"}));
    sub->add_option("--threshold", threshold, "open-set confidence threshold");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  common(gen);

  auto* train = app.add_subcommand("train", "train on a generated dataset");
  common(train);
  training(train);
  std::optional<std::string> data_dir, resume;
  std::optional<std::size_t> stop_after;
  train->add_option("--data", data_dir, "dataset directory (default: --out)");
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop after this many total steps");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out domain");
  std::string checkpoint;
  std::string eval_data = "out";
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "dataset directory");
  ev->add_option("--out", out, "output directory");
  ev->add_option("--threshold", threshold, "open-set confidence threshold");

  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients for every loss");
  double tolerance = 1e-4;
  std::string fault;
  std::size_t points = 20;
  gc->add_option("--config", config, "accepted for symmetry; unused");
  gc->add_option("--tolerance", tolerance, "max relative error");
  gc->add_option("--inject-fault", fault, "flip the sign of one loss's analytic gradient");
  gc->add_option("--points", points, "random points per loss");

  auto* ab = app.add_subcommand("ablate", "run ablation rows over several seeds");
  common(ab);
  training(ab);
  std::optional<std::string> rows;
  std::optional<std::size_t> seeds;
  ab->add_option("--rows", rows, "row ids, e.g. abij");
  ab->add_option("--seeds", seeds, "number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  const Overrides o{seed, ablation, threshold, meta_mode};
  if (gen->parsed()) return cmd_gen_data(config, out, o);
  if (train->parsed()) {
    TrainArgs a{config, out, {}, {}, stop_after};
    if (data_dir) a.data = fs::path(*data_dir);
    if (resume) a.resume = fs::path(*resume);
    return cmd_train(a, o);
  }
  if (ev->parsed()) return cmd_eval(checkpoint, eval_data, out, o);
  if (gc->parsed()) return cmd_gradcheck(tolerance, fault, points);
  if (ab->parsed()) return cmd_ablate(config, out, o, rows, seeds);
  return kUsage;
}
