#pragma once

#include "pixlab/autodiff.hpp"
#include "pixlab/encoders.hpp"
#include "pixlab/image.hpp"

#include <vector>

namespace pixlab {

// Inclusive pixel box.
struct BBox {
  int row_min = 0;
  int col_min = 0;
  int row_max = 0;
  int col_max = 0;

  int height() const { return row_max - row_min + 1; }
  int width() const { return col_max - col_min + 1; }
  bool operator==(const BBox&) const = default;
};

enum class ProjectionMode { kShared, kSeparate };

struct PoolingConfig {
  // A patch joins the pool when its covered fraction is strictly above this.
  double overlap_threshold = 0.5;
  ProjectionMode projection = ProjectionMode::kSeparate;

  void validate() const;
};

BBox mask_to_bbox(const Mask& mask);

// Scales the box about its centre by `enlarge`, then clips to the image.
BBox expand_bbox(const BBox& box, double enlarge, int height, int width);

struct Crop {
  Image image;
  Mask mask;
  BBox box;  // region of the source that was cropped
};

// Crops to the (enlarged) mask box and resamples to out_height x out_width:
// bilinear for the image, nearest for the mask.
Crop derive_crop(const Image& image, const Mask& mask, double enlarge, int out_height, int out_width);

Mask all_ones_mask(int height, int width);

// Fraction of on-pixels per patch; grid x grid, row-major.
Matrix patch_overlap_fractions(const Mask& mask, int patch_size);

// Row vector of averaging weights over the grid*grid patches for `mask`:
// uniform over patches whose overlap exceeds the threshold, or a one-hot at
// the maximal-overlap patch (lowest index on ties) when none does.
Eigen::RowVectorXd pooling_weights(const Mask& mask, int patch_size, double overlap_threshold);

// Average of qualifying dense features, projected by `proj` (embed_dim x
// proj_dim) and L2-normalized. `mask` must match the encoder resolution.
Embedding pool_region_features(const DenseFeatureMap& dense, const Mask& mask, const PoolingConfig& cfg,
                               const Matrix& proj);

}  // namespace pixlab
