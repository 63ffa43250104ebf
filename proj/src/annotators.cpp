#include "pixlab/annotators.hpp"

#include "pixlab/synthetic.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <limits>
#include <thread>

namespace pixlab {

using nlohmann::json;

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::kConsistent:
      return "consistent";
    case Verdict::kInconsistent:
      return "inconsistent";
    case Verdict::kInvalid:
      return "invalid";
  }
  return "invalid";
}

Verdict verdict_from_string(std::string_view s) {
  if (s == "consistent") return Verdict::kConsistent;
  if (s == "inconsistent") return Verdict::kInconsistent;
  if (s == "invalid") return Verdict::kInvalid;
  throw ValidationError("unknown verdict '" + std::string(s) + "'");
}

void AnnotatorSuite::validate() const {
  if (!object_captioner || !validator || !context_captioner || !merger) {
    throw ValidationError("annotator suite is missing a client");
  }
}

MockCaptionMerger::MockCaptionMerger(std::string id)
    : MockCaptionMerger(std::move(id), [](const std::string& o, const std::string& c) { return o + ", " + c; }) {}

namespace {

std::string grid_position(const BBox& box, int height, int width) {
  const double cy = 0.5 * (box.row_min + box.row_max + 1);
  const double cx = 0.5 * (box.col_min + box.col_max + 1);
  const int r = std::min(2, static_cast<int>(3.0 * cy / height));
  const int c = std::min(2, static_cast<int>(3.0 * cx / width));
  static constexpr const char* kRows[] = {"top", "middle", "bottom"};
  static constexpr const char* kCols[] = {"left", "center", "right"};
  if (r == 1 && c == 1) return "center";
  return std::string(kRows[r]) + " " + kCols[c];
}

std::string dominant_color(const Image& crop, const Mask& mask) {
  double sum[3] = {0, 0, 0};
  int n = 0;
  for (int r = 0; r < crop.height; ++r) {
    for (int c = 0; c < crop.width; ++c) {
      if (!mask.on(r, c)) continue;
      for (int ch = 0; ch < 3; ++ch) sum[ch] += denormalize_value(crop.at(r, c, ch));
      ++n;
    }
  }
  if (n == 0) throw AnnotatorError("object captioner: empty crop mask");
  std::string best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::string_view name : kColorNames) {
    const auto rgb = palette_color(name);
    double d = 0.0;
    for (int ch = 0; ch < 3; ++ch) d += std::pow(sum[ch] / n - rgb[ch], 2);
    if (d < best_dist) {
      best_dist = d;
      best = std::string(name);
    }
  }
  return best;
}

}  // namespace

AnnotatorSuite make_heuristic_suite() {
  AnnotatorSuite suite;
  suite.object_captioner = std::make_shared<MockObjectCaptioner>(
      "heuristic-object", [](const Image& crop, const Mask& m) { return "a " + dominant_color(crop, m) + " object"; });
  suite.validator = std::make_shared<MockCaptionValidator>(
      "heuristic-validator",
      [](const std::string& caption, const Image&) { return caption.empty() ? Verdict::kInvalid : Verdict::kConsistent; });
  suite.context_captioner =
      std::make_shared<MockContextCaptioner>("heuristic-context", [](const Image& image, const BBox& box) {
        return "located at the " + grid_position(box, image.height, image.width) + " of the image";
      });
  suite.merger = std::make_shared<MockCaptionMerger>("heuristic-merger");
  return suite;
}

HttpAnnotatorClient::HttpAnnotatorClient(HttpClientConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw ValidationError("annotator endpoint URL is empty");
  if (config_.max_attempts < 1) throw ValidationError("max_attempts must be >= 1");
}

std::string HttpAnnotatorClient::post(const std::string& path, const std::string& body) const {
  httplib::Client client(config_.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  auto backoff = config_.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    auto res = client.Post(path, body, "application/json");
    if (res) {
      if (res->status >= 200 && res->status < 300) return res->body;
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status != 429 && res->status < 500) break;
    } else {
      last_error = httplib::to_string(res.error());
    }
    if (attempt < config_.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::milliseconds(static_cast<long>(backoff.count() * config_.backoff_multiplier));
    }
  }
  throw AnnotatorError(path + ": " + last_error);
}

namespace {

std::string image_payload(const Image& image) { return httplib::detail::base64_encode(encode_ppm(image)); }

std::string text_field(const std::string& response, const char* key) {
  try {
    return json::parse(response).at(key).get<std::string>();
  } catch (const json::exception& e) {
    throw AnnotatorError(std::string("malformed annotator response: ") + e.what());
  }
}

}  // namespace

std::string HttpAnnotatorClient::caption(const Image& crop, const Mask& crop_mask) const {
  json body{{"image", image_payload(crop)}, {"mask", encode_rle(crop_mask)}};
  return text_field(post("/object_caption", body.dump()), "text");
}

Verdict HttpAnnotatorClient::validate(const std::string& caption, const Image& crop) const {
  json body{{"caption", caption}, {"image", image_payload(crop)}};
  const std::string v = text_field(post("/validate", body.dump()), "verdict");
  try {
    return verdict_from_string(v);
  } catch (const ValidationError& e) {
    throw AnnotatorError(e.what());
  }
}

std::string HttpAnnotatorClient::describe(const Image& image, const BBox& box) const {
  json body{{"image", image_payload(image)}, {"bbox", {box.row_min, box.col_min, box.row_max, box.col_max}}};
  return text_field(post("/context_caption", body.dump()), "text");
}

std::string HttpAnnotatorClient::merge(const std::string& object_caption, const std::string& context_caption) const {
  json body{{"object", object_caption}, {"context", context_caption}};
  return text_field(post("/merge", body.dump()), "text");
}

AnnotatorSuite make_http_suite(const HttpClientConfig& config) {
  auto client = std::make_shared<const HttpAnnotatorClient>(config);
  return AnnotatorSuite{client, client, client, client};
}

}  // namespace pixlab
