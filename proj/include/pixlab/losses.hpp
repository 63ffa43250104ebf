#pragma once

#include "pixlab/autodiff.hpp"
#include "pixlab/encoders.hpp"

#include <cmath>
#include <span>

namespace pixlab {

// Similarity logits are cosine similarity * exp(log_scale), i.e. the
// temperature is exp(-log_scale).
struct ContrastiveConfig {
  double log_scale = 4.0652;
  double log_scale_max = std::log(100.0);

  double logit_scale() const { return std::exp(log_scale); }
  void validate() const;
};

struct LossWeights {
  double alpha = 0.25;
  double beta = 0.25;

  void validate() const;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const Embedding& a, const Embedding& b);

// Symmetric in-batch InfoNCE; row i of each batch is the positive pair.
// Rows need not be normalized.
double contrastive_loss(const EmbeddingBatch& visual, const EmbeddingBatch& text, const ContrastiveConfig& cfg);

double composite_loss(double l_cl, double l_fc, double l_lg, const LossWeights& w);

namespace autodiff {

// Differentiable contrastive loss; `log_scale` is a 1x1 node. Returns 1x1.
Var contrastive_loss(Var visual, Var text, Var log_scale);

// Mean over rows of (1 - cos(a_i, b_i)); the positive-only alignment variant.
Var positive_cosine_loss(Var a, Var b);

}  // namespace autodiff
}  // namespace pixlab
