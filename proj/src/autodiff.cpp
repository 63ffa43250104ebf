#include "pixlab/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pixlab::autodiff {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::push(Matrix value, bool requires_grad, Backprop backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (record_ && requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::leaf(Matrix value) { return push(std::move(value), record_, {}); }

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  Var v = push(p.value, record_, {});
  param_ids_.emplace(&p, v.id_);
  return v;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backprop));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backprop backprop) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw std::logic_error("autodiff: operands live on different tapes");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  return push(std::move(value), needs, std::move(backprop));
}

void Tape::add_grad(Var v, const Matrix& g) { add_grad_expr(v, g); }

void Tape::backward(Var output) {
  if (value(output).size() != 1) throw std::invalid_argument("backward: output is not a scalar");
  backward(output, Matrix::Ones(1, 1));
}

void Tape::backward(Var output, const Matrix& seed) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (seed.rows() != value(output).rows() || seed.cols() != value(output).cols()) {
    throw std::invalid_argument("backward: seed shape mismatch");
  }
  add_grad(output, seed);
  for (int id = output.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backprop || n.grad.size() == 0) continue;
    // Copy: the callback may append to other nodes' grads but never its own.
    const Matrix g = n.grad;
    n.backprop(*this, g);
  }
}

void Tape::accumulate(GradientMap& grads) const {
  for (const auto& [param, id] : param_ids_) {
    const Matrix& g = nodes_[id].grad;
    if (g.size() == 0) continue;
    auto [it, inserted] = grads.try_emplace(param, g);
    if (!inserted) it->second += g;
  }
}

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("autodiff: uninitialized Var");
  return *a.tape();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.add_grad_expr(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.add_grad_expr(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.add_grad_expr(a, g * b.value());
    if (t.requires_grad(b)) t.add_grad_expr(b, g.transpose() * a.value());
  });
}

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.add_grad(a, g);
    t.add_grad(b, g);
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Matrix out = a.value() * s;
  return t.record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.add_grad_expr(a, g * s); });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.add_grad(a, g);
    if (t.requires_grad(row)) t.add_grad_expr(row, g.colwise().sum());
  });
}

Var add_tiled(Var a, Var block) {
  Tape& t = tape_of(a);
  const Eigen::Index br = block.rows();
  if (block.cols() != a.cols() || br == 0 || a.rows() % br != 0) {
    throw std::invalid_argument("add_tiled: shape mismatch");
  }
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < a.rows(); r += br) out.middleRows(r, br) += block.value();
  return t.record(std::move(out), {a, block}, [a, block, br](Tape& t, const Matrix& g) {
    t.add_grad(a, g);
    if (!t.requires_grad(block)) return;
    Matrix acc = Matrix::Zero(br, g.cols());
    for (Eigen::Index r = 0; r < g.rows(); r += br) acc += g.middleRows(r, br);
    t.add_grad(block, acc);
  });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = a.value();
    Matrix dx(x.rows(), x.cols());
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx.data()[i] = g.data()[i] * (cdf + v * pdf);
    }
    t.add_grad(a, dx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: affine parameter shape mismatch");
  }
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = x.value().row(r);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mean) * inv_std[r];
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& t, const Matrix& g) {
                    if (t.requires_grad(gamma)) {
                      t.add_grad_expr(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                    }
                    if (t.requires_grad(beta)) t.add_grad_expr(beta, g.colwise().sum());
                    if (!t.requires_grad(x)) return;
                    const Eigen::Index d = g.cols();
                    Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                    Matrix dx(g.rows(), d);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double mean_d = dxhat.row(r).mean();
                      const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(d);
                      dx.row(r) = inv_std[r] *
                                  (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
                    }
                    t.add_grad(x, dx);
                  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  Matrix probs = out;
  return t.record(std::move(out), {a}, [a, probs = std::move(probs)](Tape& t, const Matrix& g) {
    Eigen::VectorXd dots = (g.array() * probs.array()).rowwise().sum();
    Matrix dx = probs.array() * (g.array().colwise() - dots.array());
    t.add_grad(a, dx);
  });
}

Var l2_normalize_rows(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms[r] > 0.0)) throw std::domain_error("l2_normalize_rows: zero row");
  }
  Matrix out = x.array().colwise() / norms.array();
  Matrix unit = out;
  return t.record(std::move(out), {a}, [a, unit = std::move(unit), norms = std::move(norms)](
                                          Tape& t, const Matrix& g) {
    Eigen::VectorXd dots = (g.array() * unit.array()).rowwise().sum();
    Matrix dx = (g - (unit.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array();
    t.add_grad(a, dx);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Matrix out = a.value().middleRows(start, count);
  const Eigen::Index rows = a.rows();
  return t.record(std::move(out), {a}, [a, start, count, rows](Tape& t, const Matrix& g) {
    Matrix dx = Matrix::Zero(rows, g.cols());
    dx.middleRows(start, count) = g;
    t.add_grad(a, dx);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Matrix out = a.value().middleCols(start, count);
  const Eigen::Index cols = a.cols();
  return t.record(std::move(out), {a}, [a, start, count, cols](Tape& t, const Matrix& g) {
    Matrix dx = Matrix::Zero(g.rows(), cols);
    dx.middleCols(start, count) = g;
    t.add_grad(a, dx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  offsets.reserve(parts.size());
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs, offsets](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (t.requires_grad(inputs[i])) {
        t.add_grad_expr(inputs[i], g.middleRows(offsets[i], inputs[i].rows()));
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  offsets.reserve(parts.size());
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs, offsets](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (t.requires_grad(inputs[i])) {
        t.add_grad_expr(inputs[i], g.middleCols(offsets[i], inputs[i].cols()));
      }
    }
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) {
    throw std::invalid_argument("weighted_sum: terms and coefficients disagree");
  }
  Tape& t = tape_of(terms[0]);
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw std::invalid_argument("weighted_sum: non-scalar term");
    total += coeffs[i] * terms[i].value()(0, 0);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  std::vector<Var> inputs(terms.begin(), terms.end());
  std::vector<double> c(coeffs.begin(), coeffs.end());
  return t.record(std::move(out), terms, [inputs, c](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) t.add_grad_expr(inputs[i], g * c[i]);
  });
}

}  // namespace pixlab::autodiff

namespace pixlab::autodiff {

Var gather_rows(Var a, std::vector<Eigen::Index> rows) {
  Tape& t = tape_of(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const Eigen::Index src_rows = a.rows();
  return t.record(std::move(out), {a}, [a, rows = std::move(rows), src_rows](Tape& t, const Matrix& g) {
    Matrix dx = Matrix::Zero(src_rows, g.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.add_grad(a, dx);
  });
}

Var multi_head_attention(Var qkv, int batch, int heads, std::vector<Matrix>* probs) {
  Tape& t = tape_of(qkv);
  if (batch <= 0 || heads <= 0 || qkv.cols() % 3 != 0 || qkv.rows() % batch != 0) {
    throw std::invalid_argument("multi_head_attention: bad packing");
  }
  const Eigen::Index d = qkv.cols() / 3;
  if (d % heads != 0) throw std::invalid_argument("multi_head_attention: width not divisible by heads");
  const Eigen::Index tokens = qkv.rows() / batch;
  const Eigen::Index dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& x = qkv.value();

  Matrix out(qkv.rows(), d);
  std::vector<Matrix> p_all;
  p_all.reserve(static_cast<std::size_t>(batch) * heads);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = b * tokens;
    for (int h = 0; h < heads; ++h) {
      const auto q = x.block(r0, h * dh, tokens, dh);
      const auto k = x.block(r0, d + h * dh, tokens, dh);
      const auto v = x.block(r0, 2 * d + h * dh, tokens, dh);
      Matrix p = (q * k.transpose()) * s;
      for (Eigen::Index r = 0; r < tokens; ++r) {
        const double m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
      }
      out.block(r0, h * dh, tokens, dh).noalias() = p * v;
      p_all.push_back(std::move(p));
    }
  }
  if (probs != nullptr) *probs = p_all;
  return t.record(std::move(out), {qkv}, [qkv, batch, heads, tokens, d, dh, s, p_all = std::move(p_all)](
                                             Tape& t, const Matrix& g) {
    const Matrix& x = qkv.value();
    Matrix dx(x.rows(), x.cols());
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = b * tokens;
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = p_all[static_cast<std::size_t>(b) * heads + h];
        const auto q = x.block(r0, h * dh, tokens, dh);
        const auto k = x.block(r0, d + h * dh, tokens, dh);
        const auto v = x.block(r0, 2 * d + h * dh, tokens, dh);
        const auto go = g.block(r0, h * dh, tokens, dh);
        Matrix dp = go * v.transpose();
        Eigen::VectorXd dots = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = (p.array() * (dp.array().colwise() - dots.array())) * s;
        dx.block(r0, h * dh, tokens, dh).noalias() = ds * k;
        dx.block(r0, d + h * dh, tokens, dh).noalias() = ds.transpose() * q;
        dx.block(r0, 2 * d + h * dh, tokens, dh).noalias() = p.transpose() * go;
      }
    }
    t.add_grad(qkv, dx);
  });
}

}  // namespace pixlab::autodiff
