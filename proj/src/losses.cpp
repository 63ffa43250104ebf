#include "pixlab/losses.hpp"

#include "pixlab/image.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pixlab {

void ContrastiveConfig::validate() const {
  if (!std::isfinite(log_scale) || !std::isfinite(log_scale_max)) throw ValidationError("log scale must be finite");
}

void LossWeights::validate() const {
  if (!(std::isfinite(alpha) && alpha >= 0.0 && std::isfinite(beta) && beta >= 0.0)) {
    throw ValidationError("loss weights must be finite and non-negative");
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw ValidationError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double cosine_similarity(const Embedding& a, const Embedding& b) {
  return cosine_similarity(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                           std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

namespace {

struct ContrastiveForward {
  Matrix unit_v;
  Matrix unit_t;
  Eigen::VectorXd norm_v;
  Eigen::VectorXd norm_t;
  Matrix logits;
  double loss = 0.0;
};

Matrix unit_rows(const Matrix& x, Eigen::VectorXd& norms, const char* which) {
  norms.resize(x.rows());
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double ss = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) ss += x(r, c) * x(r, c);
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > 0.0)) {
      throw ValidationError(std::string("contrastive_loss: zero ") + which + " embedding at row " + std::to_string(r));
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / norms[r];
  }
  return out;
}

// -log softmax of the diagonal entry along one row (by_row) or column.
// Both orientations run the same arithmetic so swapping the two batches
// yields a bit-identical loss.
double diagonal_nll(const Matrix& logits, Eigen::Index k, bool by_row) {
  const Eigen::Index n = logits.rows();
  auto at = [&](Eigen::Index j) { return by_row ? logits(k, j) : logits(j, k); };
  double m = at(0);
  for (Eigen::Index j = 1; j < n; ++j) m = std::max(m, at(j));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(at(j) - m);
  return m + std::log(sum) - logits(k, k);
}

ContrastiveForward contrastive_forward(const Matrix& v, const Matrix& t, double log_scale) {
  if (v.rows() != t.rows()) {
    throw ShapeError("contrastive_loss: batch sizes differ (" + std::to_string(v.rows()) + " vs " +
                     std::to_string(t.rows()) + ")");
  }
  if (v.cols() != t.cols()) throw ShapeError("contrastive_loss: embedding widths differ");
  if (v.rows() == 0) throw ValidationError("contrastive_loss: empty batch");
  ContrastiveForward f;
  f.unit_v = unit_rows(v, f.norm_v, "visual");
  f.unit_t = unit_rows(t, f.norm_t, "text");
  const Eigen::Index b = v.rows();
  const double sc = std::exp(log_scale);
  f.logits.resize(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      double dot = 0.0;
      for (Eigen::Index d = 0; d < v.cols(); ++d) dot += f.unit_v(i, d) * f.unit_t(j, d);
      f.logits(i, j) = sc * dot;
    }
  }
  double rows = 0.0;
  double cols = 0.0;
  for (Eigen::Index k = 0; k < b; ++k) {
    rows += diagonal_nll(f.logits, k, true);
    cols += diagonal_nll(f.logits, k, false);
  }
  f.loss = (rows + cols) / (2.0 * static_cast<double>(b));
  return f;
}

}  // namespace

double contrastive_loss(const EmbeddingBatch& visual, const EmbeddingBatch& text, const ContrastiveConfig& cfg) {
  cfg.validate();
  return contrastive_forward(visual, text, cfg.log_scale).loss;
}

double composite_loss(double l_cl, double l_fc, double l_lg, const LossWeights& w) {
  if (!std::isfinite(l_cl) || !std::isfinite(l_fc) || !std::isfinite(l_lg)) {
    throw ValidationError("composite_loss: non-finite branch loss");
  }
  w.validate();
  return l_cl + w.alpha * l_fc + w.beta * l_lg;
}

namespace autodiff {

Var contrastive_loss(Var visual, Var text, Var log_scale) {
  Tape& tape = *visual.tape();
  if (log_scale.value().size() != 1) throw ShapeError("contrastive_loss: log scale must be 1x1");
  ContrastiveForward f = contrastive_forward(visual.value(), text.value(), log_scale.value()(0, 0));
  Matrix out(1, 1);
  out(0, 0) = f.loss;
  return tape.record(std::move(out), {visual, text, log_scale}, [visual, text, log_scale, f = std::move(f)](
                                                                     Tape& t, const Matrix& g) {
    const Eigen::Index b = f.logits.rows();
    const double upstream = g(0, 0);
    // d loss / d logits = (row softmax + column softmax - 2 I) / (2B).
    Matrix dlogits(b, b);
    Matrix col_max = f.logits.colwise().maxCoeff();
    Matrix col_exp = (f.logits.rowwise() - col_max.row(0)).array().exp();
    Eigen::RowVectorXd col_sum = col_exp.colwise().sum();
    for (Eigen::Index i = 0; i < b; ++i) {
      const double m = f.logits.row(i).maxCoeff();
      Eigen::RowVectorXd e = (f.logits.row(i).array() - m).exp();
      e /= e.sum();
      for (Eigen::Index j = 0; j < b; ++j) {
        dlogits(i, j) = e[j] + col_exp(i, j) / col_sum[j] - (i == j ? 2.0 : 0.0);
      }
    }
    dlogits *= upstream / (2.0 * static_cast<double>(b));

    if (t.requires_grad(log_scale)) {
      Matrix dls(1, 1);
      dls(0, 0) = (dlogits.array() * f.logits.array()).sum();
      t.add_grad(log_scale, dls);
    }
    const double sc = std::exp(log_scale.value()(0, 0));
    const Matrix dsim = dlogits * sc;
    auto through_norm = [](const Matrix& unit, const Eigen::VectorXd& norms, const Matrix& dunit) {
      Eigen::VectorXd dots = (unit.array() * dunit.array()).rowwise().sum();
      return Matrix((dunit - (unit.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array());
    };
    if (t.requires_grad(visual)) t.add_grad(visual, through_norm(f.unit_v, f.norm_v, dsim * f.unit_t));
    if (t.requires_grad(text)) t.add_grad(text, through_norm(f.unit_t, f.norm_t, dsim.transpose() * f.unit_v));
  });
}

Var positive_cosine_loss(Var a, Var b) {
  Tape& tape = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
    throw ShapeError("positive_cosine_loss: shape mismatch");
  }
  Eigen::VectorXd na;
  Eigen::VectorXd nb;
  Matrix ua = unit_rows(a.value(), na, "first");
  Matrix ub = unit_rows(b.value(), nb, "second");
  const double n = static_cast<double>(a.rows());
  Matrix out(1, 1);
  out(0, 0) = 1.0 - (ua.array() * ub.array()).sum() / n;
  return tape.record(std::move(out), {a, b}, [a, b, ua, ub, na, nb, n](Tape& t, const Matrix& g) {
    const double scale = -g(0, 0) / n;
    auto through_norm = [](const Matrix& unit, const Eigen::VectorXd& norms, const Matrix& dunit) {
      Eigen::VectorXd dots = (unit.array() * dunit.array()).rowwise().sum();
      return Matrix((dunit - (unit.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array());
    };
    if (t.requires_grad(a)) t.add_grad(a, through_norm(ua, na, ub * scale));
    if (t.requires_grad(b)) t.add_grad(b, through_norm(ub, nb, ua * scale));
  });
}

}  // namespace autodiff
}  // namespace pixlab
