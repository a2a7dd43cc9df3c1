#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ltds/config.hpp"
#include "ltds/eval.hpp"

namespace ltds::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablation;
  std::optional<double> threshold;
  std::optional<std::string> meta_mode;
};

RunConfig resolve_config(const std::filesystem::path& path, const Overrides& o);
std::size_t heldout_of(const RunConfig& cfg);

/// Writes dataset.csv, embeddings.csv and manifest.json into `out`.
int cmd_gen_data(const std::filesystem::path& config, const std::filesystem::path& out, const Overrides& o);

struct TrainArgs {
  std::filesystem::path config;
  std::filesystem::path out;
  /// Directory holding dataset.csv and embeddings.csv (defaults to `out`).
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> resume;
  /// Stop after this many total steps (for interrupt/resume testing).
  std::optional<std::size_t> stop_after;
};
/// Writes steps.jsonl, checkpoint.json (plus checkpoint_<step>.json at the configured
/// interval) and metrics.json into `out`.
int cmd_train(const TrainArgs& args, const Overrides& o);

int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
             const std::filesystem::path& out, const Overrides& o);

int cmd_gradcheck(double tolerance, const std::string& inject_fault, std::size_t points);

int cmd_ablate(const std::filesystem::path& config, const std::filesystem::path& out, const Overrides& o,
               const std::optional<std::string>& rows, const std::optional<std::size_t>& seeds);

/// Generates the synthetic data, trains and evaluates on the held-out domain.
eval::MetricReport train_and_evaluate(const RunConfig& cfg, const data::Dataset& ds);

struct AblationRow {
  char id = 'a';
  std::vector<eval::MetricReport> per_seed;
  double acc_u = 0.0, acc = 0.0, h = 0.0;
};
/// Each row over `seeds` consecutive root seeds starting at cfg.seed; data is regenerated per seed.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& rows, std::size_t seeds,
                                      std::size_t threads);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace ltds::cli
