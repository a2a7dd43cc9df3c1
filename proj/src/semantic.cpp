#include "ltds/semantic.hpp"

#include <cmath>
#include <string>

#include "ltds/error.hpp"
#include "ltds/linalg.hpp"

namespace ltds {

SemanticTable::SemanticTable(Matrix rows) : s_(std::move(rows)) {
  if (s_.rows() < 2) throw InputError("SemanticTable: needs at least 2 classes");
  if (!s_.all_finite()) throw InputError("SemanticTable: non-finite entry");
  for (std::size_t c = 0; c < s_.rows(); ++c) {
    const double n = norm2(s_.row(c));
    if (std::abs(n - 1.0) > 1e-10)
      throw InputError("SemanticTable: row " + std::to_string(c) + " has norm " + std::to_string(n));
  }
}

SemanticTable SemanticTable::normalized(const Matrix& rows) {
  Matrix out = rows;
  for (std::size_t c = 0; c < out.rows(); ++c) out.set_row(c, unit_normalize(rows.row(c)));
  return SemanticTable(std::move(out));
}

double SemanticTable::similarity(std::size_t a, std::size_t b) const { return dot(s_.row(a), s_.row(b)); }

}  // namespace ltds
