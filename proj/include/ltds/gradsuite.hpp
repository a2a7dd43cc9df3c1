#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ltds::gradsuite {

struct Options {
  std::size_t points = 20;
  double tolerance = 1e-4;
  double eps = 1e-5;
  /// Added to |fd| in the relative-error denominator.
  double floor = 1e-8;
  std::uint64_t seed = 20240;
  /// Name of a check whose analytic gradient is sign-flipped (self-test of the harness).
  std::string inject_fault;
};

struct Check {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t points = 0;
  bool pass = false;
};

/// Names of the checks, in run order.
std::vector<std::string> check_names();

/// Analytic vs central-difference gradients for every loss at `points` random states.
std::vector<Check> run(const Options& opts);

}  // namespace ltds::gradsuite
