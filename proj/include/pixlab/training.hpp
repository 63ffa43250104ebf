#pragma once

#include "pixlab/model.hpp"
#include "pixlab/optimizer.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pixlab {

// What the cropped-region embedding is aligned with.
enum class FcTarget {
  kText,    // crop embedding vs caption embedding
  kVisual,  // crop embedding vs the mask-prompted full-image embedding
};

enum class FcLoss {
  kContrastive,   // in-batch negatives
  kPositiveOnly,  // 1 - cosine of matched pairs only
};

struct TrainingConfig {
  double alpha = 0.25;
  double beta = 0.25;
  double full_image_ratio = 0.1;
  double short_text_probability = 0.5;
  int batch_size = 1024;
  int epochs = 8;
  int warmup_steps = 800;
  double learning_rate_mask_embed = 1e-5;
  double learning_rate_other = 1e-7;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
  double enlarge_factor = 1.5;
  double overlap_threshold = 0.5;
  double log_scale_init = 4.0652;
  FcTarget fc_target = FcTarget::kText;
  FcLoss fc_loss = FcLoss::kContrastive;

  void validate() const;
  LossWeights weights() const { return {alpha, beta}; }
};

struct TrainingSample {
  MaskedImage input;  // I, M at encoder resolution
  std::string long_caption;
  std::string short_caption;
  std::string global_caption;
  MaskedImage crop;  // I', M'
};

// Builds the tuple, deriving the crop at the image's own resolution.
TrainingSample make_training_sample(Image image, Mask mask, std::string long_caption, std::string short_caption,
                                    std::string global_caption, double enlarge);

enum class CaptionKind { kLong, kShort, kGlobal };

struct BatchItem {
  MaskedImage full;
  MaskedImage crop;
  std::string caption;
  CaptionKind caption_kind = CaptionKind::kLong;
  bool swapped = false;  // replaced by the all-ones mask and global caption
};

// Per sample: with probability full_image_ratio use the all-ones mask, the
// identity crop and the global caption; otherwise pick the short caption
// with probability short_text_probability, else the long caption.
std::vector<BatchItem> assemble_batch(std::span<const TrainingSample> samples, std::mt19937_64& rng,
                                      const TrainingConfig& cfg);

struct BranchLosses {
  double l_cl = 0.0;
  double l_fc = 0.0;
  double l_lg = 0.0;
  double l_total = 0.0;
};

// Runs the three branches; when `grads` is non-null, accumulates
// d l_total / d parameter into it.
BranchLosses forward_three_branch(std::span<const BatchItem> batch, const PixModel& model, const TrainingConfig& cfg,
                                  GradientMap* grads = nullptr);

struct StepMetrics {
  long step = 0;
  double l_cl = 0.0;
  double l_fc = 0.0;
  double l_lg = 0.0;
  double l_total = 0.0;
  double log_scale = 0.0;
  double lr_mask = 0.0;
  double lr_other = 0.0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Called after every optimizer step; returning false stops training.
using StepCallback = std::function<bool(const StepMetrics&, const PixModel&)>;

struct TrainResult {
  std::vector<StepMetrics> metrics;
  bool stopped_early = false;
};

TrainResult train(PixModel& model, std::span<const TrainingSample> dataset, const TrainingConfig& cfg,
                  const StepCallback& on_step = {});

// One JSON object per line with fields step, l_cl, l_fc, l_lg, l_total,
// log_scale, lr_mask, lr_other.
void write_metrics_line(std::ostream& out, const StepMetrics& m);

ModelConfig make_model_config(const TrainingConfig& cfg, const VisionEncoderConfig& vision,
                              const TextEncoderConfig& text, std::uint64_t seed);

}  // namespace pixlab
