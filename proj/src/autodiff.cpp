#include "ltds/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ltds/error.hpp"

namespace ltds::ad {

const Matrix& Var::value() const {
  if (!tape_) throw ConstructionError("Var: uninitialized handle");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ConstructionError("Var::scalar: node is not 1x1");
  return v[0];
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    check_owned(p, "record");
    needs = needs || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::check_owned(Var v, const char* op) const {
  if (!v.valid()) throw ConstructionError(std::string(op) + ": uninitialized operand");
  if (&v.tape() != this) throw ConstructionError(std::string(op) + ": operand belongs to another tape");
}

bool Tape::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[static_cast<std::size_t>(v.id())].requires_grad;
}

Matrix Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix* Tape::grad_buffer(Var v) {
  check_owned(v, "grad_buffer");
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return &n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Matrix* buf = grad_buffer(v);
  if (!buf) return;
  if (!buf->same_shape(g)) throw ConstructionError("accumulate: gradient shape mismatch");
  *buf += g;
}

void Tape::backward(Var root) {
  check_owned(root, "backward");
  const Matrix& rv = value(root.id());
  if (rv.rows() != 1 || rv.cols() != 1) throw ConstructionError("backward: root must be a 1x1 scalar");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  if (!nodes_[static_cast<std::size_t>(root.id())].requires_grad) return;
  *grad_buffer(root) = Matrix(1, 1, 1.0);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    // Copy: the callback may grow other buffers but never this node's.
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

namespace {

Tape& common_tape(std::initializer_list<Var> vars, const char* op) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ConstructionError(std::string(op) + ": uninitialized operand");
    if (t && &v.tape() != t) throw ConstructionError(std::string(op) + ": operands on different tapes");
    t = &v.tape();
  }
  return *t;
}

}  // namespace

Var affine(Var x, Var w, Var b) {
  Tape& t = common_tape({x, w, b}, "affine");
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const Matrix& bv = b.value();
  if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows()) {
    throw InputError("affine: shape mismatch (x " + std::to_string(xv.rows()) + "x" +
                     std::to_string(xv.cols()) + ", W " + std::to_string(wv.rows()) + "x" +
                     std::to_string(wv.cols()) + ")");
  }
  Matrix out = matmul_nt(xv, wv);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bv[c];
  }
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate(x, matmul(g, w.value()));
    if (tp.requires_grad(w)) tp.accumulate(w, matmul_tn(g, x.value()));
    if (tp.requires_grad(b)) {
      Matrix gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      tp.accumulate(b, gb);
    }
  });
}

Var relu(Var x) {
  Tape& t = common_tape({x}, "relu");
  Matrix out = x.value();
  const bool track = t.requires_grad(x);
  for (double& v : out.values()) {
    if (track) t.note_kink_distance(std::abs(v));
    v = v > 0.0 ? v : 0.0;
  }
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
    Matrix gx = g;
    const Matrix& xv = x.value();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(xv[i] > 0.0)) gx[i] = 0.0;
    tp.accumulate(x, gx);
  });
}

Var normalize_rows(Var x, double eps) {
  Tape& t = common_tape({x}, "normalize_rows");
  const Matrix& xv = x.value();
  Matrix out = xv;
  std::vector<double> norms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    norms[r] = norm2(xv.row(r));
    const double d = std::max(norms[r], eps);
    for (double& v : out.row(r)) v /= d;
  }
  return t.record(out, {x}, [x, out, norms, eps](Tape& tp, const Matrix& g) {
    Matrix gx(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      if (norms[r] > eps) {
        // d(x/|x|) = (I - u uᵀ)/|x|
        const double proj = dot(g.row(r), out.row(r));
        for (std::size_t c = 0; c < g.cols(); ++c)
          gx(r, c) = (g(r, c) - proj * out(r, c)) / norms[r];
      } else {
        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) = g(r, c) / eps;
      }
    }
    tp.accumulate(x, gx);
  });
}

Var batch_standardize(Var x, Var gamma, Var beta, double eps, BatchMoments* moments) {
  Tape& t = common_tape({x, gamma, beta}, "batch_standardize");
  const Matrix& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  if (n == 0) throw InputError("batch_standardize: empty batch");
  if (gamma.value().size() != d || beta.value().size() != d)
    throw InputError("batch_standardize: gamma/beta width mismatch");
  Matrix mean(1, d), var(1, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += xv(r, c);
  mean *= 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double dev = xv(r, c) - mean[c];
      var[c] += dev * dev;
    }
  var *= 1.0 / static_cast<double>(n);
  if (moments) *moments = BatchMoments{mean, var};

  Matrix xhat(n, d);
  std::vector<double> inv_std(d);
  for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) xhat(r, c) = (xv(r, c) - mean[c]) * inv_std[c];
  Matrix out(n, d);
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = gv[c] * xhat(r, c) + bv[c];

  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std](Tape& tp, const Matrix& g) {
    const std::size_t n = g.rows();
    const std::size_t d = g.cols();
    Matrix ggamma(1, d), gbeta(1, d);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        ggamma[c] += g(r, c) * xhat(r, c);
        gbeta[c] += g(r, c);
      }
    if (tp.requires_grad(gamma)) tp.accumulate(gamma, ggamma);
    if (tp.requires_grad(beta)) tp.accumulate(beta, gbeta);
    if (tp.requires_grad(x)) {
      const Matrix& gv = gamma.value();
      const double inv_n = 1.0 / static_cast<double>(n);
      Matrix gx(n, d);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          gx(r, c) = gv[c] * inv_std[c] * inv_n *
                     (static_cast<double>(n) * g(r, c) - gbeta[c] - xhat(r, c) * ggamma[c]);
        }
      tp.accumulate(x, gx);
    }
  });
}

Var fixed_standardize(Var x, const Matrix& mean, const Matrix& variance, Var gamma, Var beta,
                      double eps) {
  Tape& t = common_tape({x, gamma, beta}, "fixed_standardize");
  const Matrix& xv = x.value();
  const std::size_t d = xv.cols();
  if (mean.size() != d || variance.size() != d || gamma.value().size() != d || beta.value().size() != d)
    throw InputError("fixed_standardize: width mismatch");
  std::vector<double> inv_std(d);
  for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(variance[c] + eps);
  Matrix xhat(xv.rows(), d), out(xv.rows(), d);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (xv(r, c) - mean[c]) * inv_std[c];
      out(r, c) = gamma.value()[c] * xhat(r, c) + beta.value()[c];
    }
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std](Tape& tp, const Matrix& g) {
    Matrix ggamma(1, g.cols()), gbeta(1, g.cols()), gx(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) {
        ggamma[c] += g(r, c) * xhat(r, c);
        gbeta[c] += g(r, c);
        gx(r, c) = g(r, c) * gamma.value()[c] * inv_std[c];
      }
    if (tp.requires_grad(gamma)) tp.accumulate(gamma, ggamma);
    if (tp.requires_grad(beta)) tp.accumulate(beta, gbeta);
    if (tp.requires_grad(x)) tp.accumulate(x, gx);
  });
}

Var add(Var a, Var b) {
  Tape& t = common_tape({a, b}, "add");
  if (!a.value().same_shape(b.value())) throw InputError("add: shape mismatch");
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var scale(Var a, double k) {
  Tape& t = common_tape({a}, "scale");
  return t.record(a.value() * k, {a}, [a, k](Tape& tp, const Matrix& g) { tp.accumulate(a, g * k); });
}

Var weighted_sum(std::span<const std::pair<double, Var>> terms) {
  if (terms.empty()) throw ConstructionError("weighted_sum: no terms");
  Tape& t = terms.front().second.tape();
  std::vector<Var> parents;
  Matrix out(terms.front().second.rows(), terms.front().second.cols());
  for (const auto& [k, v] : terms) {
    t.check_owned(v, "weighted_sum");
    if (!v.value().same_shape(out)) throw InputError("weighted_sum: shape mismatch");
    out.add_scaled(v.value(), k);
    parents.push_back(v);
  }
  std::vector<std::pair<double, Var>> copy(terms.begin(), terms.end());
  return t.record(std::move(out), parents, [copy](Tape& tp, const Matrix& g) {
    for (const auto& [k, v] : copy)
      if (k != 0.0) tp.accumulate(v, g * k);
  });
}

Var sum_all(Var x) {
  Tape& t = common_tape({x}, "sum_all");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return t.record(Matrix(1, 1, s), {x}, [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, Matrix(x.rows(), x.cols(), g[0]));
  });
}

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw InputError("mean_all: empty input");
  return scale(sum_all(x), 1.0 / n);
}

Var sum_squares(Var x) {
  Tape& t = common_tape({x}, "sum_squares");
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  return t.record(Matrix(1, 1, s), {x}, [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, x.value() * (2.0 * g[0]));
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = common_tape({x}, "gather_rows");
  const Matrix& xv = x.value();
  Matrix out(rows.size(), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw InputError("gather_rows: row index out of range");
    out.set_row(i, xv.row(rows[i]));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {x}, [x, idx](Tape& tp, const Matrix& g) {
    Matrix* buf = tp.grad_buffer(x);
    if (!buf) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = buf->row(idx[i]);
      auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var overlay_rows(Var base, Var rows, std::span<const std::size_t> idx) {
  Tape& t = common_tape({base, rows}, "overlay_rows");
  Matrix out = base.value();
  const Matrix& rv = rows.value();
  if (rv.rows() != idx.size() || rv.cols() != out.cols())
    throw InputError("overlay_rows: shape mismatch");
  std::vector<bool> replaced(out.rows(), false);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= out.rows()) throw InputError("overlay_rows: row index out of range");
    if (replaced[idx[i]]) throw InputError("overlay_rows: duplicate target row");
    replaced[idx[i]] = true;
    out.set_row(idx[i], rv.row(i));
  }
  std::vector<std::size_t> targets(idx.begin(), idx.end());
  return t.record(std::move(out), {base, rows},
                  [base, rows, targets, replaced](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(base)) {
      Matrix gb = g;
      for (std::size_t r = 0; r < gb.rows(); ++r)
        if (replaced[r])
          for (double& v : gb.row(r)) v = 0.0;
      tp.accumulate(base, gb);
    }
    if (tp.requires_grad(rows)) {
      Matrix gr(targets.size(), g.cols());
      for (std::size_t i = 0; i < targets.size(); ++i) gr.set_row(i, g.row(targets[i]));
      tp.accumulate(rows, gr);
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ConstructionError("concat_rows: no parts");
  Tape& t = parts.front().tape();
  const std::size_t cols = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    t.check_owned(p, "concat_rows");
    if (p.cols() != cols) throw InputError("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  std::size_t r0 = 0;
  for (const Var& p : parts) {
    for (std::size_t r = 0; r < p.rows(); ++r) out.set_row(r0 + r, p.value().row(r));
    r0 += p.rows();
  }
  std::vector<Var> copy(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [copy](Tape& tp, const Matrix& g) {
    std::size_t r0 = 0;
    for (const Var& p : copy) {
      if (tp.requires_grad(p)) {
        Matrix gp(p.rows(), p.cols());
        for (std::size_t r = 0; r < p.rows(); ++r) gp.set_row(r, g.row(r0 + r));
        tp.accumulate(p, gp);
      }
      r0 += p.rows();
    }
  });
}

Var scalar_kernel(double value, std::vector<std::pair<Var, Matrix>> local_grads) {
  if (local_grads.empty()) throw ConstructionError("scalar_kernel: needs at least one input");
  Tape& t = local_grads.front().first.tape();
  std::vector<Var> parents;
  for (const auto& [v, g] : local_grads) {
    t.check_owned(v, "scalar_kernel");
    if (!v.value().same_shape(g)) throw ConstructionError("scalar_kernel: gradient shape mismatch");
    parents.push_back(v);
  }
  return t.record(Matrix(1, 1, value), parents, [lg = std::move(local_grads)](Tape& tp, const Matrix& g) {
    for (const auto& [v, lgrad] : lg)
      if (tp.requires_grad(v)) tp.accumulate(v, lgrad * g[0]);
  });
}

}  // namespace ltds::ad
