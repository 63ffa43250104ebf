#include "pixlab/optimizer.hpp"

#include <cmath>

namespace pixlab {

void AdamW::step(std::span<Parameter* const> params, const GradientMap& grads, double lr_mask_embed,
                 double lr_other) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (Parameter* p : params) {
    auto it = grads.find(p);
    if (it == grads.end()) continue;
    const Matrix& g = it->second;
    const double lr = p->group == ParamGroup::kMaskEmbed ? lr_mask_embed : lr_other;
    Moments& m = moments_[p];
    if (m.first.size() == 0) {
      m.first = Matrix::Zero(g.rows(), g.cols());
      m.second = Matrix::Zero(g.rows(), g.cols());
    }
    m.first = config_.beta1 * m.first + (1.0 - config_.beta1) * g;
    m.second = config_.beta2 * m.second + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (lr == 0.0) continue;
    if (p->decay && config_.weight_decay != 0.0) p->value *= 1.0 - lr * config_.weight_decay;
    p->value.array() -= lr * (m.first.array() / bc1) / ((m.second.array() / bc2).sqrt() + config_.epsilon);
  }
}

double warmup_rate(double base, long step, long warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return base;
  return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

}  // namespace pixlab
