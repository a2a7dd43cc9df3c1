#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ltds/config.hpp"
#include "ltds/meta.hpp"

namespace ltds {

/// Versioned JSON container: {"format": "ltds-checkpoint", "version": 1, ...}.
/// Doubles are written in shortest round-trip form, so a restored state is bit-identical.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_fingerprint = 0;
  meta::TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, std::uint64_t dataset_fingerprint,
                     const meta::TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ltds
