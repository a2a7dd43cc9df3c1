#pragma once

#include <cstddef>

#include "ltds/matrix.hpp"

namespace ltds {

/// Per-class semantic embeddings, one unit-norm row per class.
class SemanticTable {
 public:
  SemanticTable() = default;
  /// Validates that rows are unit-norm within 1e-10 and that there are at least 2 classes.
  explicit SemanticTable(Matrix rows);
  /// Re-normalizes every row first; throws DomainError on a near-zero row.
  static SemanticTable normalized(const Matrix& rows);

  const Matrix& matrix() const noexcept { return s_; }
  std::size_t num_classes() const noexcept { return s_.rows(); }
  std::size_t dim() const noexcept { return s_.cols(); }
  /// s_a · s_b
  double similarity(std::size_t a, std::size_t b) const;

  friend bool operator==(const SemanticTable&, const SemanticTable&) = default;

 private:
  Matrix s_;
};

}  // namespace ltds
