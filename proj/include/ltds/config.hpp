#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ltds/data.hpp"
#include "ltds/eval.hpp"
#include "ltds/meta.hpp"
#include "ltds/model.hpp"

namespace ltds {

struct AblateConfig {
  std::string rows = "abij";
  std::size_t seeds = 5;
  /// Worker threads for the sweep (0: hardware concurrency).
  std::size_t threads = 1;
  friend bool operator==(const AblateConfig&, const AblateConfig&) = default;
};

/// Everything one invocation needs. Subsystem seeds are derived from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  data::SyntheticConfig data;
  model::ModelConfig model;
  meta::TrainConfig train;
  eval::EvalOptions eval;
  /// Held-out domain for evaluation; -1 selects the last domain.
  long heldout_domain = -1;
  std::size_t checkpoint_every = 0;
  AblateConfig ablate;

  /// Re-derives data.seed and train.seed and copies the shared dimensions into `model`.
  void finalize();
  void validate() const;
};

/// Parses a JSON document; missing keys keep their defaults, unknown keys are errors.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical single-line JSON with every field.
std::string dump_config(const RunConfig& cfg);
/// FNV-1a 64 of dump_config.
std::uint64_t config_hash(const RunConfig& cfg);
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace ltds
