#include "pixlab/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace pixlab {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{
    {220, 40, 40},
    {40, 180, 60},
    {50, 80, 230},
    {235, 215, 40},
    {205, 50, 205},
    {40, 205, 215},
    {245, 140, 30},
    {245, 245, 245},
}};

constexpr std::array<std::string_view, 3> kRowNames{"top", "middle", "bottom"};
constexpr std::array<std::string_view, 3> kColNames{"left", "center", "right"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::string position_name(int cell_row, int cell_col) {
  if (cell_row == 1 && cell_col == 1) return "center";
  return std::string(kRowNames[cell_row]) + " " + std::string(kColNames[cell_col]);
}

bool inside(std::string_view shape, double dy, double dx, double r) {
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= r;
  // Upward triangle with apex at -r and base at +r.
  return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
}

std::string describe(const ShapeObject& o) { return "a " + o.size + " " + o.color + " " + o.shape; }

std::string relation(const ShapeObject& from, const ShapeObject& to) {
  const int dy = to.center_row - from.center_row;
  const int dx = to.center_col - from.center_col;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? "left of" : "right of";
  return dy > 0 ? "above" : "below";
}

std::string position_phrase(const ShapeObject& o) { return o.position == "center" ? "at the center" : "at the " + o.position; }

void caption(SyntheticSample& s) {
  const ShapeObject& t = s.objects[static_cast<std::size_t>(s.target)];
  std::string long_caption = describe(t) + " " + position_phrase(t);
  std::vector<std::string> relations;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (static_cast<int>(i) == s.target) continue;
    relations.push_back(relation(t, s.objects[i]) + " " + describe(s.objects[i]));
  }
  for (std::size_t i = 0; i < relations.size(); ++i) long_caption += (i == 0 ? ", " : " and ") + relations[i];
  s.long_caption = long_caption;
  s.short_caption = "a " + t.color + " " + t.shape;
  std::string global = "an image of ";
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (i > 0) global += i + 1 == s.objects.size() ? " and " : ", ";
    global += describe(s.objects[i]) + " " + position_phrase(s.objects[i]);
  }
  s.global_caption = global;
}

SyntheticSample draw_sample(std::mt19937_64& rng, int resolution) {
  SyntheticSample s;
  std::array<std::uint8_t, 3> base{};
  for (auto& c : base) c = static_cast<std::uint8_t>(pick(rng, 100));
  const std::array<int, 3> tilt{static_cast<int>(pick(rng, 41)) - 20, static_cast<int>(pick(rng, 41)) - 20,
                                static_cast<int>(pick(rng, 41)) - 20};
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(resolution) * resolution * 3);
  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = base[ch] + tilt[ch] * (static_cast<double>(r + c) / (2.0 * resolution));
        pixels[(static_cast<std::size_t>(r) * resolution + c) * 3 + ch] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 110L));
      }
    }
  }

  const int count = 1 + static_cast<int>(pick(rng, 3));
  std::vector<int> cells(9);
  for (int i = 0; i < 9; ++i) cells[i] = i;
  for (int i = 8; i > 0; --i) std::swap(cells[i], cells[pick(rng, static_cast<std::size_t>(i) + 1)]);

  const double cell = resolution / 3.0;
  std::vector<int> owner(static_cast<std::size_t>(resolution) * resolution, -1);
  for (int k = 0; k < count; ++k) {
    ShapeObject o;
    o.shape = std::string(kShapeNames[pick(rng, kShapeNames.size())]);
    const std::size_t color = pick(rng, kColorNames.size());
    o.color = std::string(kColorNames[color]);
    const bool large = pick(rng, 2) == 1;
    o.size = std::string(kSizeNames[large ? 1 : 0]);
    const int cr = cells[k] / 3;
    const int cc = cells[k] % 3;
    o.position = position_name(cr, cc);
    const int jitter_r = static_cast<int>(pick(rng, 3)) - 1;
    const int jitter_c = static_cast<int>(pick(rng, 3)) - 1;
    o.center_row = static_cast<int>(std::floor((cr + 0.5) * cell)) + jitter_r;
    o.center_col = static_cast<int>(std::floor((cc + 0.5) * cell)) + jitter_c;
    const double radius = resolution * (large ? 0.13 : 0.08);
    for (int r = 0; r < resolution; ++r) {
      for (int c = 0; c < resolution; ++c) {
        if (!inside(o.shape, r + 0.5 - o.center_row, c + 0.5 - o.center_col, radius)) continue;
        owner[static_cast<std::size_t>(r) * resolution + c] = k;
        for (int ch = 0; ch < 3; ++ch) pixels[(static_cast<std::size_t>(r) * resolution + c) * 3 + ch] = kPalette[color][ch];
      }
    }
    s.objects.push_back(std::move(o));
  }
  for (int k = 0; k < count; ++k) {
    Mask m(resolution, resolution);
    for (std::size_t i = 0; i < owner.size(); ++i) m.data[i] = owner[i] == k ? 1.0 : 0.0;
    s.objects[static_cast<std::size_t>(k)].mask = std::move(m);
  }
  s.image = Image(resolution, resolution, 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) s.image.data[i] = normalize_byte(pixels[i]);
  s.target = static_cast<int>(pick(rng, static_cast<std::size_t>(count)));
  caption(s);
  return s;
}

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

}  // namespace

std::array<std::uint8_t, 3> palette_color(std::string_view name) {
  for (std::size_t i = 0; i < kColorNames.size(); ++i) {
    if (kColorNames[i] == name) return kPalette[i];
  }
  throw ValidationError("unknown color " + std::string(name));
}

std::vector<SyntheticSample> generate_synthetic_dataset(int n, std::uint64_t seed, int resolution) {
  if (n < 1) throw ValidationError("dataset size must be >= 1");
  if (resolution < 12) throw ValidationError("resolution must be >= 12");
  std::mt19937_64 rng(seed);
  std::set<std::string> used_captions;
  std::set<std::pair<std::string, std::vector<std::int64_t>>> used_pairs;
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(n));
  constexpr int kAttempts = 64;
  while (static_cast<int>(out.size()) < n) {
    SyntheticSample s = draw_sample(rng, resolution);
    for (int attempt = 1; attempt < kAttempts && used_captions.count(s.long_caption) != 0; ++attempt) {
      s = draw_sample(rng, resolution);
    }
    auto key = std::make_pair(s.long_caption, encode_rle(s.mask()));
    if (!used_pairs.insert(std::move(key)).second) continue;
    used_captions.insert(s.long_caption);
    s.id = sample_id(static_cast<int>(out.size()));
    out.push_back(std::move(s));
  }
  return out;
}

std::optional<ParsedCaption> parse_long_caption(std::string_view caption) {
  std::istringstream in{std::string(caption)};
  std::string article;
  ParsedCaption p;
  if (!(in >> article >> p.size >> p.color >> p.shape) || article != "a") return std::nullopt;
  auto known = [](const auto& names, const std::string& word) {
    return std::find(names.begin(), names.end(), word) != names.end();
  };
  if (!known(kSizeNames, p.size) || !known(kColorNames, p.color) || !known(kShapeNames, p.shape)) return std::nullopt;
  return p;
}

void write_synthetic_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::ostringstream lines;
  for (const SyntheticSample& s : samples) {
    const std::string image_ref = "images/" + s.id + ".ppm";
    save_ppm(dir / image_ref, s.image);
    ordered_json j;
    j["id"] = s.id;
    j["image"] = image_ref;
    j["target"] = s.target;
    j["long_caption"] = s.long_caption;
    j["short_caption"] = s.short_caption;
    j["global_caption"] = s.global_caption;
    ordered_json objects = ordered_json::array();
    for (const ShapeObject& o : s.objects) {
      ordered_json jo;
      jo["shape"] = o.shape;
      jo["color"] = o.color;
      jo["size"] = o.size;
      jo["position"] = o.position;
      jo["center"] = {o.center_row, o.center_col};
      jo["mask"] = encode_rle(o.mask);
      objects.push_back(std::move(jo));
    }
    j["objects"] = std::move(objects);
    lines << j.dump() << '\n';
  }
  std::ofstream out(dir / "samples.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "samples.jsonl").string());
  out << lines.str();
}

std::vector<SyntheticSample> read_synthetic_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "samples.jsonl");
  if (!in) throw std::runtime_error("cannot open dataset " + (dir / "samples.jsonl").string());
  std::vector<SyntheticSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SyntheticSample s;
      s.id = j.at("id").get<std::string>();
      s.image = load_ppm(dir / j.at("image").get<std::string>());
      s.target = j.at("target").get<int>();
      s.long_caption = j.at("long_caption").get<std::string>();
      s.short_caption = j.at("short_caption").get<std::string>();
      s.global_caption = j.at("global_caption").get<std::string>();
      for (const json& jo : j.at("objects")) {
        ShapeObject o;
        o.shape = jo.at("shape").get<std::string>();
        o.color = jo.at("color").get<std::string>();
        o.size = jo.at("size").get<std::string>();
        o.position = jo.at("position").get<std::string>();
        o.center_row = jo.at("center").at(0).get<int>();
        o.center_col = jo.at("center").at(1).get<int>();
        o.mask = decode_rle(jo.at("mask").get<std::vector<std::int64_t>>());
        s.objects.push_back(std::move(o));
      }
      if (s.target < 0 || s.target >= static_cast<int>(s.objects.size())) throw ValidationError("target out of range");
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ValidationError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<TrainingSample> to_training_samples(const std::vector<SyntheticSample>& samples, double enlarge) {
  std::vector<TrainingSample> out;
  out.reserve(samples.size());
  for (const SyntheticSample& s : samples) {
    out.push_back(make_training_sample(s.image, s.mask(), s.long_caption, s.short_caption, s.global_caption, enlarge));
  }
  return out;
}

}  // namespace pixlab
