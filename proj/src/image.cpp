#include "pixlab/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace pixlab {

Image::Image(int h, int w, int c, double fill) : height(h), width(w), channels(c) {
  if (h <= 0 || w <= 0 || c <= 0) throw ShapeError("image dimensions must be positive");
  data.assign(static_cast<std::size_t>(h) * w * c, fill);
}

Mask::Mask(int h, int w, double fill) : height(h), width(w) {
  if (h <= 0 || w <= 0) throw ShapeError("mask dimensions must be positive");
  data.assign(static_cast<std::size_t>(h) * w, fill);
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](double v) { return v > 0.5; }));
}

Mask binarize(const Mask& mask, double threshold) {
  Mask out = mask;
  for (double& v : out.data) v = v > threshold ? 1.0 : 0.0;
  return out;
}

MaskedImage make_masked_image(Image pixels, Mask mask) {
  if (pixels.channels != 3) throw ShapeError("image must have 3 channels");
  if (pixels.height != mask.height || pixels.width != mask.width) {
    throw ShapeError("image is " + std::to_string(pixels.height) + "x" + std::to_string(pixels.width) +
                     " but mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  if (pixels.data.size() != static_cast<std::size_t>(pixels.height) * pixels.width * 3 ||
      mask.data.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw ShapeError("buffer size disagrees with declared dimensions");
  }
  for (double v : mask.data) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("mask values must lie in [0, 1]");
  }
  return {std::move(pixels), binarize(mask)};
}

namespace {

double source_coord(int dst, int dst_size, int src_size) {
  if (dst_size == 1) return 0.0;
  return static_cast<double>(dst) * (src_size - 1) / (dst_size - 1);
}

}  // namespace

Image resize_bilinear(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw ShapeError("resize target must be positive");
  if (height == image.height && width == image.width) return image;
  Image out(height, width, image.channels);
  for (int r = 0; r < height; ++r) {
    const double sy = source_coord(r, height, image.height);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), image.height - 1);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int c = 0; c < width; ++c) {
      const double sx = source_coord(c, width, image.width);
      const int x0 = std::min(static_cast<int>(std::floor(sx)), image.width - 1);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      for (int ch = 0; ch < image.channels; ++ch) {
        const double top = image.at(y0, x0, ch) * (1 - fx) + image.at(y0, x1, ch) * fx;
        const double bottom = image.at(y1, x0, ch) * (1 - fx) + image.at(y1, x1, ch) * fx;
        out.at(r, c, ch) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Mask resize_nearest(const Mask& mask, int height, int width) {
  if (height <= 0 || width <= 0) throw ShapeError("resize target must be positive");
  if (height == mask.height && width == mask.width) return mask;
  Mask out(height, width);
  for (int r = 0; r < height; ++r) {
    const int sy = std::clamp(static_cast<int>(std::lround(source_coord(r, height, mask.height))), 0, mask.height - 1);
    for (int c = 0; c < width; ++c) {
      const int sx = std::clamp(static_cast<int>(std::lround(source_coord(c, width, mask.width))), 0, mask.width - 1);
      out.at(r, c) = mask.at(sy, sx);
    }
  }
  return out;
}

double normalize_byte(std::uint8_t byte) { return (static_cast<double>(byte) / 255.0 - 0.5) / 0.5; }

std::uint8_t denormalize_value(double value) {
  const double b = std::round((value * 0.5 + 0.5) * 255.0);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

std::string encode_ppm(const Image& image) {
  if (image.channels != 3) throw ShapeError("PPM requires 3 channels");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.data.size());
  for (double v : image.data) out.push_back(static_cast<char>(denormalize_value(v)));
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval != 255) {
    throw ValidationError("not an 8-bit binary PPM");
  }
  in.get();
  Image image(height, width, 3);
  std::string raw(image.data.size(), '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw ValidationError("truncated PPM");
  for (std::size_t i = 0; i < raw.size(); ++i) image.data[i] = normalize_byte(static_cast<std::uint8_t>(raw[i]));
  return image;
}

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_ppm(buf.str());
}

void save_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path.string());
  const std::string bytes = encode_ppm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void save_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> gray, int height, int width) {
  if (gray.size() != static_cast<std::size_t>(height) * width) throw ShapeError("PGM buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::int64_t> encode_rle(const Mask& mask) {
  std::vector<std::int64_t> rle{mask.height, mask.width};
  const auto n = static_cast<std::int64_t>(mask.data.size());
  std::int64_t i = 0;
  while (i < n) {
    if (mask.data[i] <= 0.5) {
      ++i;
      continue;
    }
    const std::int64_t start = i;
    while (i < n && mask.data[i] > 0.5) ++i;
    rle.push_back(start);
    rle.push_back(i - start);
  }
  return rle;
}

Mask decode_rle(std::span<const std::int64_t> rle) {
  if (rle.size() < 2 || rle.size() % 2 != 0) throw ValidationError("RLE must hold height, width and (start, length) pairs");
  if (rle[0] <= 0 || rle[1] <= 0) throw ValidationError("RLE dimensions must be positive");
  Mask mask(static_cast<int>(rle[0]), static_cast<int>(rle[1]));
  const auto n = static_cast<std::int64_t>(mask.data.size());
  std::int64_t prev_end = 0;
  for (std::size_t k = 2; k < rle.size(); k += 2) {
    const std::int64_t start = rle[k];
    const std::int64_t len = rle[k + 1];
    if (start < prev_end || len <= 0 || start + len > n) throw ValidationError("RLE runs out of order or out of bounds");
    std::fill(mask.data.begin() + start, mask.data.begin() + start + len, 1.0);
    prev_end = start + len;
  }
  return mask;
}

}  // namespace pixlab
