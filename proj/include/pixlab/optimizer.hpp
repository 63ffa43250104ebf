#pragma once

#include "pixlab/autodiff.hpp"

#include <span>
#include <unordered_map>

namespace pixlab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-6;
  double weight_decay = 1e-2;
};

// Adam with decoupled weight decay. Decay applies only to parameters whose
// `decay` flag is set (weight matrices); parameters without a gradient in
// the map are left untouched.
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& config) : config_(config) {}

  void step(std::span<Parameter* const> params, const GradientMap& grads, double lr_mask_embed, double lr_other);
  long steps() const { return steps_; }

 private:
  struct Moments {
    Matrix first;
    Matrix second;
  };

  AdamWConfig config_;
  std::unordered_map<const Parameter*, Moments> moments_;
  long steps_ = 0;
};

// Linear warmup: base * step / warmup_steps for step < warmup_steps, then
// base. Steps are counted from 1.
double warmup_rate(double base, long step, long warmup_steps);

}  // namespace pixlab
