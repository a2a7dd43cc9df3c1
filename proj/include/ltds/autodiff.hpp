#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "ltds/matrix.hpp"

namespace ltds::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Value of a 1×1 node.
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Linear record of a computation. Nodes are appended in evaluation order, so a reverse
/// sweep over ids is a valid topological order for backpropagation.
class Tape {
 public:
  /// Called during backward with the node's accumulated output gradient.
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Matrix value);
  Var constant(Matrix value);
  /// Adds a derived node. `parents` decide whether it needs a gradient; `backward` is
  /// dropped when none of them does.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(Var v) const;
  /// Gradient of the last backward() root with respect to v (zeros if unreachable).
  Matrix grad(Var v) const;
  /// Adds g into the gradient buffer of v; no-op for nodes without gradients.
  void accumulate(Var v, const Matrix& g);
  /// Direct access to v's gradient buffer (allocated on first use) for sparse updates.
  Matrix* grad_buffer(Var v);

  void backward(Var root);
  std::size_t size() const noexcept { return nodes_.size(); }
  void check_owned(Var v, const char* op) const;

  /// Smallest |input| seen by a ReLU on a parameter-dependent path (infinity if none).
  double kink_margin() const noexcept { return kink_margin_; }
  void note_kink_distance(double d) noexcept { kink_margin_ = std::min(kink_margin_, d); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

// Primitive operations. Every op checks that its operands live on the same tape.

/// x·Wᵀ + b with x: n×in, W: out×in, b: 1×out.
Var affine(Var x, Var w, Var b);
Var relu(Var x);
/// Row-wise x / max(‖x‖, eps).
Var normalize_rows(Var x, double eps = 1e-12);

struct BatchMoments {
  Matrix mean;      // 1×d
  Matrix variance;  // 1×d, population
};
/// Column standardization with batch statistics followed by gamma/beta scaling.
/// `moments`, when non-null, receives the batch statistics.
Var batch_standardize(Var x, Var gamma, Var beta, double eps, BatchMoments* moments = nullptr);
/// Same transform with fixed statistics (evaluation mode).
Var fixed_standardize(Var x, const Matrix& mean, const Matrix& variance, Var gamma, Var beta,
                      double eps);

Var add(Var a, Var b);
Var scale(Var a, double k);
/// Σ kᵢ·vᵢ for scalar (1×1) or equal-shaped terms.
Var weighted_sum(std::span<const std::pair<double, Var>> terms);
Var sum_all(Var x);
Var mean_all(Var x);
Var sum_squares(Var x);
Var gather_rows(Var x, std::span<const std::size_t> rows);
/// Copy of `base` with row idx[i] replaced by row i of `rows`.
Var overlay_rows(Var base, Var rows, std::span<const std::size_t> idx);
Var concat_rows(std::span<const Var> parts);

/// Scalar node whose local gradients are already known: d out / d input_i = grads_i.
/// This is how loss kernels with closed-form gradients enter the tape.
Var scalar_kernel(double value, std::vector<std::pair<Var, Matrix>> local_grads);

}  // namespace ltds::ad
