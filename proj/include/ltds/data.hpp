#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ltds/losses.hpp"
#include "ltds/matrix.hpp"
#include "ltds/rng.hpp"
#include "ltds/semantic.hpp"

namespace ltds::data {

enum class Split { train, val, test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
  std::vector<double> x;
  std::size_t label = 0;
  std::size_t domain = 0;
  Split split = Split::train;
  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Samples of all domains; domain `num_domains - 1` is conventionally the held-out one.
struct Dataset {
  std::size_t num_classes = 0;
  std::size_t num_domains = 0;
  std::size_t d_x = 0;
  std::vector<Sample> samples;
  /// n_c^d over the train split, one row per domain (held-out rows are zero).
  losses::DomainClassCounts counts;
  SemanticTable semantic;

  /// Domains with at least one train sample, ascending.
  std::vector<std::size_t> train_domains() const;
  /// Y^tr: classes with a positive train count in any domain other than `excluded`.
  std::vector<bool> known_classes(std::size_t excluded = static_cast<std::size_t>(-1)) const;
  std::vector<std::size_t> indices(std::size_t domain, Split split) const;
  std::vector<std::size_t> indices(Split split) const;
  /// Stacks the x of the given samples into a matrix.
  Matrix features(std::span<const std::size_t> idx) const;
  /// Recomputes counts from the train split.
  void recount();
  /// Checks the split invariants; throws InputError naming the first violation.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticConfig {
  std::size_t num_classes = 20;
  std::size_t train_domains = 4;
  std::size_t d_x = 16;
  std::size_t d_s = 16;
  long n_max = 200;
  long n_min = 5;
  /// 0 selects √(C−1), which makes n_C = n_min.
  double curve_scale = 0.0;
  /// Number of superclass clusters the anchors are drawn around.
  std::size_t groups = 4;
  double anchor_spread = 3.0;
  /// Within-group anchor spread relative to anchor_spread.
  double group_spread = 0.6;
  double noise_scale = 1.0;
  /// Extra per-class noise along the anchor direction.
  double anisotropy = 1.0;
  double semantic_noise = 0.1;
  double transform_strength = 0.5;
  double shift_scale = 0.5;
  /// Per-rank number of carrying train domains; empty selects the default tiers.
  std::vector<std::size_t> tail_domain_budget;
  /// The rarest ranks are held out of training entirely (open classes).
  std::size_t open_classes = 0;
  std::size_t val_per_class = 5;
  std::size_t test_per_class = 10;
  std::uint64_t seed = 0;

  double effective_curve_scale() const;
  /// Budget per rank after defaults are filled in.
  std::vector<std::size_t> budget() const;
  void validate() const;
  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

/// ⌊n_max·(n_min/n_max)^{√(c−1)/curve_scale}⌋ for 1-based rank c.
long longtail_counts(std::size_t c, long n_max, long n_min, std::size_t num_classes, double curve_scale);

Dataset generate(const SyntheticConfig& config);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
void save_embeddings(const SemanticTable& table, const std::filesystem::path& path);
/// Rows are re-normalized; exactly C distinct labels 0..C−1 are required.
SemanticTable load_embeddings(const std::filesystem::path& path, std::size_t num_classes, std::size_t d_s);
/// Reads the sample CSV and attaches the embedding table; C comes from the table.
Dataset load_dataset(const std::filesystem::path& samples, const std::filesystem::path& embeddings);

/// Lossless shortest decimal form.
std::string format_double(double v);
double parse_double(std::string_view s);

struct Batch {
  Matrix x;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> domains;
  std::vector<std::size_t> indices;
};

/// B train samples of `domain`, uniformly with replacement.
Batch sample_batch(const Dataset& ds, std::size_t domain, std::size_t batch_size, Rng& rng);
/// Same draw from a precomputed index list.
Batch sample_batch(const Dataset& ds, std::span<const std::size_t> pool, std::size_t batch_size, Rng& rng);
Batch gather(const Dataset& ds, std::span<const std::size_t> idx);
Batch concat(std::span<const Batch> parts);

/// FNV-1a 64 over the serialized samples and embeddings.
std::uint64_t fingerprint(const Dataset& ds);

}  // namespace ltds::data
