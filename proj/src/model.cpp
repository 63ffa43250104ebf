#include "pixlab/model.hpp"

#include <cmath>
#include <random>
#include <unordered_set>

namespace pixlab {

void ModelConfig::validate() const {
  vision.validate();
  text.validate();
  pooling().validate();
  if (vision.proj_dim != text.proj_dim) throw ValidationError("vision and text projection widths differ");
  if (!std::isfinite(log_scale_init) || !std::isfinite(log_scale_max) || log_scale_init > log_scale_max) {
    throw ValidationError("log_scale_init must be finite and at most log_scale_max");
  }
}

PixModel::PixModel(const ModelConfig& config)
    : config_(config), vision_(config.vision, config.seed), text_(config.text, config.seed) {
  config_.validate();
  std::mt19937_64 rng(config.seed ^ 0x726567696f6eULL);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(config.vision.embed_dim));
  Matrix head(config.vision.embed_dim, config.vision.proj_dim);
  for (Eigen::Index i = 0; i < head.size(); ++i) head.data()[i] = dist(rng);
  region_head_ = Parameter{"region.proj", std::move(head), ParamGroup::kOther, true};
  log_scale_ = Parameter{"logit.log_scale", Matrix::Constant(1, 1, config.log_scale_init), ParamGroup::kOther, false};
}

const Parameter& PixModel::region_projection() const {
  return config_.region_projection == ProjectionMode::kShared ? vision_.projection() : region_head_;
}

void PixModel::clamp_log_scale() {
  double& v = log_scale_.value(0, 0);
  v = std::min(v, config_.log_scale_max);
}

std::vector<Parameter*> PixModel::parameters() {
  std::vector<Parameter*> out = vision_.parameters();
  for (Parameter* p : text_.parameters()) out.push_back(p);
  if (config_.region_projection == ProjectionMode::kSeparate) out.push_back(&region_head_);
  out.push_back(&log_scale_);
  return out;
}

std::vector<const Parameter*> PixModel::parameters() const {
  auto mut = const_cast<PixModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

Parameter* PixModel::find_parameter(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

autodiff::Var PixModel::region_embeddings(autodiff::Tape& tape, autodiff::Var dense,
                                          std::span<const Mask> masks) const {
  const int grid = config_.vision.grid();
  const Eigen::Index n = static_cast<Eigen::Index>(grid) * grid;
  const auto b = static_cast<Eigen::Index>(masks.size());
  if (dense.rows() != b * n) throw ShapeError("dense features do not match the number of masks");
  Matrix weights = Matrix::Zero(b, b * n);
  for (Eigen::Index i = 0; i < b; ++i) {
    const Mask& m = masks[static_cast<std::size_t>(i)];
    if (m.height != config_.vision.input_resolution || m.width != config_.vision.input_resolution) {
      throw ShapeError("pooling mask " + std::to_string(i) + " is not at encoder resolution");
    }
    try {
      weights.block(i, i * n, 1, n) = pooling_weights(m, config_.vision.patch_size, config_.overlap_threshold);
    } catch (const ValidationError& e) {
      throw ValidationError("sample " + std::to_string(i) + ": " + e.what());
    }
  }
  autodiff::Var pooled = autodiff::matmul(tape.constant(std::move(weights)), dense);
  return autodiff::l2_normalize_rows(autodiff::matmul(pooled, tape.parameter(region_projection())));
}

Embedding infer_embedding(const PixModel& model, const MaskedImage& input) {
  return encode_vision(model.vision(), input).global;
}

Embedding infer_text_embedding(const PixModel& model, std::string_view text) {
  return encode_text(model.text(), text);
}

}  // namespace pixlab
