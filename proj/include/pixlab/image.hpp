#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pixlab {

// Raised when array dimensions disagree with each other or with a config.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Interleaved HxWxC image of per-channel normalized values.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c = 3, double fill = 0.0);

  double& at(int row, int col, int ch) { return data[(static_cast<std::size_t>(row) * width + col) * channels + ch]; }
  double at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

// Single-channel HxW region indicator with values in [0, 1].
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Mask() = default;
  Mask(int h, int w, double fill = 0.0);

  double& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  double at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  bool on(int row, int col) const { return at(row, col) > 0.5; }
  std::size_t count() const;  // pixels above 0.5
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

// An image paired with a binarized, same-resolution mask.
struct MaskedImage {
  Image pixels;
  Mask mask;
};

// Validates the pair and binarizes the mask: values above 0.5 become 1.
MaskedImage make_masked_image(Image pixels, Mask mask);

Mask binarize(const Mask& mask, double threshold = 0.5);

// Both resamplers map corner pixel centres onto corner pixel centres, so a
// resize to the same size is the identity and mask borders survive.
Image resize_bilinear(const Image& image, int height, int width);
Mask resize_nearest(const Mask& mask, int height, int width);

// 8-bit storage <-> normalized values: v = (byte / 255 - 0.5) / 0.5.
double normalize_byte(std::uint8_t byte);
std::uint8_t denormalize_value(double value);

Image load_ppm(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const Image& image);
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes);
void save_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> gray, int height, int width);

// Run-length encoding over row-major pixel order:
// [height, width, start0, length0, start1, length1, ...] covering the on-pixels.
std::vector<std::int64_t> encode_rle(const Mask& mask);
Mask decode_rle(std::span<const std::int64_t> rle);

}  // namespace pixlab
