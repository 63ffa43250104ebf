#include "pixlab/regionops.hpp"

#include <algorithm>
#include <cmath>

namespace pixlab {

void PoolingConfig::validate() const {
  if (!(overlap_threshold >= 0.0 && overlap_threshold < 1.0)) {
    throw ValidationError("overlap_threshold must lie in [0, 1)");
  }
}

BBox mask_to_bbox(const Mask& mask) {
  BBox box{mask.height, mask.width, -1, -1};
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (!mask.on(r, c)) continue;
      box.row_min = std::min(box.row_min, r);
      box.col_min = std::min(box.col_min, c);
      box.row_max = std::max(box.row_max, r);
      box.col_max = std::max(box.col_max, c);
    }
  }
  if (box.row_max < 0) throw ValidationError("mask is empty");
  return box;
}

BBox expand_bbox(const BBox& box, double enlarge, int height, int width) {
  if (!(enlarge >= 1.0) || !std::isfinite(enlarge)) throw ValidationError("enlarge factor must be >= 1");
  // Continuous extent [min, max + 1) scaled about its centre.
  const double cy = 0.5 * (box.row_min + box.row_max + 1);
  const double cx = 0.5 * (box.col_min + box.col_max + 1);
  const double hh = 0.5 * box.height() * enlarge;
  const double hw = 0.5 * box.width() * enlarge;
  constexpr double kSlack = 1e-9;
  BBox out;
  out.row_min = static_cast<int>(std::floor(cy - hh + kSlack));
  out.col_min = static_cast<int>(std::floor(cx - hw + kSlack));
  out.row_max = static_cast<int>(std::ceil(cy + hh - kSlack)) - 1;
  out.col_max = static_cast<int>(std::ceil(cx + hw - kSlack)) - 1;
  out.row_min = std::clamp(out.row_min, 0, height - 1);
  out.col_min = std::clamp(out.col_min, 0, width - 1);
  out.row_max = std::clamp(out.row_max, 0, height - 1);
  out.col_max = std::clamp(out.col_max, 0, width - 1);
  return out;
}

Crop derive_crop(const Image& image, const Mask& mask, double enlarge, int out_height, int out_width) {
  if (image.height != mask.height || image.width != mask.width) throw ShapeError("image and mask sizes differ");
  const BBox box = expand_bbox(mask_to_bbox(mask), enlarge, image.height, image.width);
  Image sub(box.height(), box.width(), image.channels);
  Mask sub_mask(box.height(), box.width());
  for (int r = 0; r < box.height(); ++r) {
    for (int c = 0; c < box.width(); ++c) {
      for (int ch = 0; ch < image.channels; ++ch) sub.at(r, c, ch) = image.at(box.row_min + r, box.col_min + c, ch);
      sub_mask.at(r, c) = mask.on(box.row_min + r, box.col_min + c) ? 1.0 : 0.0;
    }
  }
  return {resize_bilinear(sub, out_height, out_width), resize_nearest(sub_mask, out_height, out_width), box};
}

Mask all_ones_mask(int height, int width) {
  if (height <= 0 || width <= 0) throw ValidationError("mask dimensions must be positive");
  return Mask(height, width, 1.0);
}

Matrix patch_overlap_fractions(const Mask& mask, int patch_size) {
  if (patch_size <= 0 || mask.height % patch_size != 0 || mask.width % patch_size != 0) {
    throw ShapeError("mask dimensions are not multiples of the patch size");
  }
  const int gh = mask.height / patch_size;
  const int gw = mask.width / patch_size;
  Matrix frac = Matrix::Zero(gh, gw);
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (mask.on(r, c)) frac(r / patch_size, c / patch_size) += 1.0;
    }
  }
  return frac / static_cast<double>(patch_size * patch_size);
}

Eigen::RowVectorXd pooling_weights(const Mask& mask, int patch_size, double overlap_threshold) {
  const Matrix frac = patch_overlap_fractions(mask, patch_size);
  const Eigen::Index n = frac.size();
  Eigen::RowVectorXd w = Eigen::RowVectorXd::Zero(n);
  int selected = 0;
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = frac.data()[i];
    if (f > overlap_threshold) {
      w[i] = 1.0;
      ++selected;
    }
    if (f > 0.0 && (best < 0 || f > frac.data()[best])) best = i;
  }
  if (best < 0) throw ValidationError("mask is empty");
  if (selected == 0) {
    w[best] = 1.0;
    return w;
  }
  return w / static_cast<double>(selected);
}

Embedding pool_region_features(const DenseFeatureMap& dense, const Mask& mask, const PoolingConfig& cfg,
                               const Matrix& proj) {
  cfg.validate();
  if (dense.grid <= 0 || dense.features.rows() != static_cast<Eigen::Index>(dense.grid) * dense.grid) {
    throw ShapeError("dense feature map is not grid x grid");
  }
  if (mask.height != mask.width || mask.height % dense.grid != 0) {
    throw ShapeError("mask does not tile onto the dense grid");
  }
  if (proj.rows() != dense.features.cols()) throw ShapeError("projection input width disagrees with features");
  const Eigen::RowVectorXd w = pooling_weights(mask, mask.height / dense.grid, cfg.overlap_threshold);
  const Embedding pooled = (w * dense.features) * proj;
  const double norm = pooled.norm();
  if (!(norm > 0.0)) throw ValidationError("pooled region feature projects to zero");
  return pooled / norm;
}

}  // namespace pixlab
