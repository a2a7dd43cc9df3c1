#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ltds/matrix.hpp"
#include "ltds/rng.hpp"

namespace test {

inline ltds::Matrix random_matrix(ltds::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  ltds::Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline ltds::Matrix random_psd(ltds::Rng& rng, std::size_t d, double scale = 1.0) {
  const ltds::Matrix a = random_matrix(rng, d, d, scale / std::sqrt(static_cast<double>(d)));
  return ltds::matmul_nt(a, a);
}

/// Rows scaled to unit length.
inline ltds::Matrix unit_rows(ltds::Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double n = ltds::norm2(row);
    for (double& v : row) v /= n;
  }
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ltds_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace test
