#include "pixlab/losses.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace pixlab;
using pixlab::testing::random_matrix;

namespace {

// Per-row cross entropy written out directly from the logits.
double reference_loss(const Matrix& v, const Matrix& t, double log_scale) {
  const Eigen::Index b = v.rows();
  Matrix logits(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      logits(i, j) = std::exp(log_scale) * v.row(i).dot(t.row(j)) / (v.row(i).norm() * t.row(j).norm());
    }
  }
  double total = 0.0;
  for (Eigen::Index k = 0; k < b; ++k) {
    double row = 0.0;
    double col = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      row += std::exp(logits(k, j));
      col += std::exp(logits(j, k));
    }
    total += -std::log(std::exp(logits(k, k)) / row) - std::log(std::exp(logits(k, k)) / col);
  }
  return total / (2.0 * static_cast<double>(b));
}

}  // namespace

TEST(ContrastiveLoss, TwoOrthogonalPairsAtUnitTemperature) {
  Matrix e = Matrix::Identity(2, 2);
  const ContrastiveConfig cfg{0.0, std::log(100.0)};
  // log(1 + e^-1)
  EXPECT_NEAR(contrastive_loss(e, e, cfg), 0.31326168751822286, 1e-15);
}

TEST(ContrastiveLoss, SinglePairIsZero) {
  std::mt19937_64 rng(1);
  const Matrix v = random_matrix(rng, 1, 5);
  const Matrix t = random_matrix(rng, 1, 5);
  EXPECT_DOUBLE_EQ(contrastive_loss(v, t, ContrastiveConfig{}), 0.0);
}

TEST(ContrastiveLoss, SymmetricInItsArguments) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix v = random_matrix(rng, 7, 6);
    const Matrix t = random_matrix(rng, 7, 6);
    const ContrastiveConfig cfg{1.3, std::log(100.0)};
    EXPECT_EQ(contrastive_loss(v, t, cfg), contrastive_loss(t, v, cfg));
    EXPECT_NEAR(contrastive_loss(v, t, cfg), reference_loss(v, t, 1.3), 1e-12);
  }
}

TEST(ContrastiveLoss, InvariantToRowScaling) {
  std::mt19937_64 rng(3);
  const Matrix v = random_matrix(rng, 4, 3);
  const Matrix t = random_matrix(rng, 4, 3);
  Matrix scaled = v;
  scaled.row(2) *= 17.0;
  EXPECT_NEAR(contrastive_loss(v, t, ContrastiveConfig{}), contrastive_loss(scaled, t, ContrastiveConfig{}), 1e-12);
}

TEST(ContrastiveLoss, RejectsBadBatches) {
  EXPECT_THROW(contrastive_loss(Matrix::Ones(2, 3), Matrix::Ones(3, 3), ContrastiveConfig{}), ShapeError);
  EXPECT_THROW(contrastive_loss(Matrix::Ones(2, 3), Matrix::Ones(2, 4), ContrastiveConfig{}), ShapeError);
  EXPECT_THROW(contrastive_loss(Matrix::Zero(2, 3), Matrix::Ones(2, 3), ContrastiveConfig{}), ValidationError);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  const Matrix v = random_matrix(rng, 5, 4);
  const Matrix t = random_matrix(rng, 5, 4);
  const double ls = 0.7;
  autodiff::Tape tape(true);
  auto vv = tape.leaf(v);
  auto tv = tape.leaf(t);
  auto lv = tape.leaf(Matrix::Constant(1, 1, ls));
  tape.backward(autodiff::contrastive_loss(vv, tv, lv));
  const double h = 1e-6;
  auto check = [&](const Matrix& base, const Matrix& analytic, auto eval) {
    Matrix probe = base;
    Matrix numeric(base.rows(), base.cols());
    for (Eigen::Index i = 0; i < base.size(); ++i) {
      const double o = probe.data()[i];
      probe.data()[i] = o + h;
      const double up = eval(probe);
      probe.data()[i] = o - h;
      const double down = eval(probe);
      probe.data()[i] = o;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    EXPECT_LT((analytic - numeric).norm() / std::max(numeric.norm(), 1e-12), 1e-6);
  };
  check(v, tape.grad(vv), [&](const Matrix& p) { return reference_loss(p, t, ls); });
  check(t, tape.grad(tv), [&](const Matrix& p) { return reference_loss(v, p, ls); });
  check(Matrix::Constant(1, 1, ls), tape.grad(lv), [&](const Matrix& p) { return reference_loss(v, t, p(0, 0)); });
}

TEST(PositiveCosineLoss, ValueAndGradient) {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(rng, 3, 4);
  const Matrix b = random_matrix(rng, 3, 4);
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) expected += 1.0 - a.row(i).dot(b.row(i)) / (a.row(i).norm() * b.row(i).norm());
  autodiff::Tape tape(true);
  auto av = tape.leaf(a);
  auto loss = autodiff::positive_cosine_loss(av, tape.constant(b));
  EXPECT_NEAR(loss.value()(0, 0), expected / 3.0, 1e-14);
  tape.backward(loss);
  const double h = 1e-6;
  Matrix probe = a;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    auto eval = [&]() {
      double s = 0.0;
      for (int r = 0; r < 3; ++r) s += 1.0 - probe.row(r).dot(b.row(r)) / (probe.row(r).norm() * b.row(r).norm());
      return s / 3.0;
    };
    const double o = probe.data()[i];
    probe.data()[i] = o + h;
    const double up = eval();
    probe.data()[i] = o - h;
    const double down = eval();
    probe.data()[i] = o;
    EXPECT_NEAR(tape.grad(av).data()[i], (up - down) / (2 * h), 1e-8);
  }
}

TEST(CompositeLoss, WeightsTheAuxiliaryTerms) {
  EXPECT_DOUBLE_EQ(composite_loss(1.0, 2.0, 4.0, {0.25, 0.5}), 1.0 + 0.5 + 2.0);
  EXPECT_DOUBLE_EQ(composite_loss(1.0, 2.0, 4.0, {0.0, 0.0}), 1.0);
  EXPECT_THROW(composite_loss(1.0, NAN, 0.0, {}), ValidationError);
  EXPECT_THROW(composite_loss(1.0, 1.0, 1.0, {-0.1, 0.0}), ValidationError);
}

TEST(CosineSimilarity, BasicCases) {
  Embedding a(3);
  a << 1, 0, 0;
  Embedding b(3);
  b << 0, 2, 0;
  EXPECT_DOUBLE_EQ(cosine_similarity(a, b), 0.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, a * 5.0), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, -a), -1.0);
  EXPECT_THROW(cosine_similarity(a, Embedding::Zero(3)), ValidationError);
}
