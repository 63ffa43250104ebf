#pragma once

#include "pixlab/image.hpp"
#include "pixlab/training.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pixlab {

inline constexpr std::array<std::string_view, 4> kShapeNames{"circle", "square", "triangle", "diamond"};
inline constexpr std::array<std::string_view, 8> kColorNames{"red",     "green", "blue",   "yellow",
                                                             "magenta", "cyan",  "orange", "white"};
inline constexpr std::array<std::string_view, 2> kSizeNames{"small", "large"};

struct ShapeObject {
  std::string shape;
  std::string color;
  std::string size;
  std::string position;  // e.g. "top left", "center"
  int center_row = 0;
  int center_col = 0;
  Mask mask;  // visible pixels of this shape
};

struct SyntheticSample {
  std::string id;
  Image image;
  std::vector<ShapeObject> objects;
  int target = 0;  // the object the mask and captions refer to
  std::string long_caption;
  std::string short_caption;
  std::string global_caption;

  const Mask& mask() const { return objects.at(static_cast<std::size_t>(target)).mask; }
};

// n images of 1-3 non-overlapping colored shapes on per-image backgrounds.
// Long captions are unique within a dataset whenever the attribute space
// allows it. Same (n, seed, resolution) -> identical output.
std::vector<SyntheticSample> generate_synthetic_dataset(int n, std::uint64_t seed, int resolution);

struct ParsedCaption {
  std::string size;
  std::string color;
  std::string shape;
};
// Recovers the target attributes from a long caption ("a <size> <color> <shape> at ...").
std::optional<ParsedCaption> parse_long_caption(std::string_view caption);

// Layout: <dir>/samples.jsonl and <dir>/images/<id>.ppm.
void write_synthetic_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> read_synthetic_dataset(const std::filesystem::path& dir);

std::vector<TrainingSample> to_training_samples(const std::vector<SyntheticSample>& samples, double enlarge);

// Returns the palette RGB bytes for a color name.
std::array<std::uint8_t, 3> palette_color(std::string_view name);

}  // namespace pixlab
