#include "ltds/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ltds/error.hpp"

namespace ltds {

namespace {

ad::Var build(ad::Tape& tape, const LossFn& loss, std::span<const Matrix> params, bool leaves) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(leaves ? tape.parameter(p) : tape.constant(p));
  ad::Var out = loss(tape, vars);
  tape.check_owned(out, "loss function result");
  if (out.rows() != 1 || out.cols() != 1) throw ConstructionError("loss function must return a 1x1 node");
  return out;
}

}  // namespace

GradResult grad(const LossFn& loss, std::span<const Matrix> params) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.parameter(p));
  ad::Var out = loss(tape, vars);
  tape.check_owned(out, "loss function result");
  if (out.rows() != 1 || out.cols() != 1) throw ConstructionError("loss function must return a 1x1 node");
  GradResult result;
  result.value = out.scalar();
  if (!std::isfinite(result.value)) throw InputError("grad: loss value is not finite");
  tape.backward(out);
  result.grads.reserve(vars.size());
  for (const ad::Var& v : vars) {
    Matrix g = tape.grad(v);
    if (!g.all_finite()) throw InputError("grad: non-finite gradient");
    result.grads.push_back(std::move(g));
  }
  return result;
}

double evaluate(const LossFn& loss, std::span<const Matrix> params) {
  ad::Tape tape;
  return build(tape, loss, params, false).scalar();
}

GradResult fd_grad(const LossFn& loss, std::span<const Matrix> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw InputError("fd_grad: eps must be in (0, 1e-2]");
  std::vector<Matrix> work(params.begin(), params.end());
  GradResult result;
  result.value = evaluate(loss, work);
  if (!std::isfinite(result.value)) throw InputError("fd_grad: non-finite evaluation");
  for (std::size_t b = 0; b < work.size(); ++b) {
    Matrix g(work[b].rows(), work[b].cols());
    for (std::size_t i = 0; i < work[b].size(); ++i) {
      const double orig = work[b][i];
      work[b][i] = orig + eps;
      const double up = evaluate(loss, work);
      work[b][i] = orig - eps;
      const double down = evaluate(loss, work);
      work[b][i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw InputError("fd_grad: non-finite evaluation");
      g[i] = (up - down) / (2.0 * eps);
    }
    result.grads.push_back(std::move(g));
  }
  return result;
}

double max_relative_error(const GradResult& analytic, const GradResult& numeric, double floor) {
  if (analytic.grads.size() != numeric.grads.size()) throw InputError("max_relative_error: block count mismatch");
  double worst = 0.0;
  for (std::size_t b = 0; b < analytic.grads.size(); ++b) {
    const Matrix& a = analytic.grads[b];
    const Matrix& n = numeric.grads[b];
    if (!a.same_shape(n)) throw InputError("max_relative_error: block shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
      worst = std::max(worst, std::abs(a[i] - n[i]) / (std::abs(n[i]) + floor));
  }
  return worst;
}

std::vector<double> flatten(std::span<const Matrix> blocks) {
  std::vector<double> out;
  for (const Matrix& m : blocks) out.insert(out.end(), m.values().begin(), m.values().end());
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_similarity: zero vector");
  return dot(a, b) / (na * nb);
}

}  // namespace ltds
