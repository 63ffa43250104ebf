#pragma once

#include "pixlab/encoders.hpp"
#include "pixlab/losses.hpp"
#include "pixlab/regionops.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pixlab {

struct ModelConfig {
  VisionEncoderConfig vision;
  TextEncoderConfig text;
  double overlap_threshold = 0.5;
  ProjectionMode region_projection = ProjectionMode::kSeparate;
  double log_scale_init = 4.0652;
  double log_scale_max = 4.605170185988092;  // log(100)
  std::uint64_t seed = 0;

  void validate() const;
  PoolingConfig pooling() const { return {overlap_threshold, region_projection}; }
  bool operator==(const ModelConfig&) const = default;
};

// The vision encoder, the text encoder, the region projection head and
// the learnable logit scale.
class PixModel {
 public:
  explicit PixModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const VisionEncoder& vision() const { return vision_; }
  const TextEncoder& text() const { return text_; }
  const Parameter& region_head() const { return region_head_; }
  const Parameter& log_scale() const { return log_scale_; }

  // The projection applied to pooled dense features under the configured mode.
  const Parameter& region_projection() const;

  ContrastiveConfig contrastive() const { return {log_scale_.value(0, 0), config_.log_scale_max}; }
  void clamp_log_scale();

  // Trainable parameters in a fixed order with unique names. The frozen text
  // tower is not among them.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find_parameter(const std::string& name);

  // Pools `dense` ((B*G*G) x D) under each mask, projects and normalizes.
  autodiff::Var region_embeddings(autodiff::Tape& tape, autodiff::Var dense, std::span<const Mask> masks) const;

 private:
  ModelConfig config_;
  VisionEncoder vision_;
  TextEncoder text_;
  Parameter region_head_;
  Parameter log_scale_;
};

// Branch-1 embedding: the full image with its mask, no cropping or pooling.
Embedding infer_embedding(const PixModel& model, const MaskedImage& input);
Embedding infer_text_embedding(const PixModel& model, std::string_view text);

}  // namespace pixlab
