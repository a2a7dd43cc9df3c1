#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ltds/autodiff.hpp"
#include "ltds/matrix.hpp"

namespace ltds {

/// A differentiable scalar function of parameter blocks. The callback receives one
/// leaf per block, in the order the blocks were passed, and returns a 1×1 node.
using LossFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct GradResult {
  double value = 0.0;
  std::vector<Matrix> grads;  // same shapes and order as the parameter blocks
};

/// Reverse-mode gradient.
GradResult grad(const LossFn& loss, std::span<const Matrix> params);

/// Forward evaluation only.
double evaluate(const LossFn& loss, std::span<const Matrix> params);

/// Central differences (L(θ+εe) − L(θ−εe)) / 2ε for every coordinate.
GradResult fd_grad(const LossFn& loss, std::span<const Matrix> params, double eps = 1e-5);

/// Worst-case |analytic − fd| / (|fd| + floor) over all coordinates.
double max_relative_error(const GradResult& analytic, const GradResult& numeric, double floor = 1e-8);

/// Flattened views used by the meta-gradient oracle and cosine comparisons.
std::vector<double> flatten(std::span<const Matrix> blocks);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace ltds
