#pragma once

#include "pixlab/image.hpp"
#include "pixlab/regionops.hpp"

#include <chrono>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pixlab {

enum class Verdict { kConsistent, kInconsistent, kInvalid };

std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);

// Raised by a client when it cannot produce an answer.
class AnnotatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Clients must be safe to call from several threads at once.
class ObjectCaptioner {
 public:
  virtual ~ObjectCaptioner() = default;
  virtual std::string id() const = 0;
  virtual std::string caption(const Image& crop, const Mask& crop_mask) const = 0;
};

class CaptionValidator {
 public:
  virtual ~CaptionValidator() = default;
  virtual std::string id() const = 0;
  virtual Verdict validate(const std::string& caption, const Image& crop) const = 0;
};

class ContextCaptioner {
 public:
  virtual ~ContextCaptioner() = default;
  virtual std::string id() const = 0;
  virtual std::string describe(const Image& image, const BBox& box) const = 0;
};

class CaptionMerger {
 public:
  virtual ~CaptionMerger() = default;
  virtual std::string id() const = 0;
  virtual std::string merge(const std::string& object_caption, const std::string& context_caption) const = 0;
};

struct AnnotatorSuite {
  std::shared_ptr<const ObjectCaptioner> object_captioner;
  std::shared_ptr<const CaptionValidator> validator;
  std::shared_ptr<const ContextCaptioner> context_captioner;
  std::shared_ptr<const CaptionMerger> merger;

  void validate() const;  // all four present
};

// Function-backed clients for tests and offline runs.
class MockObjectCaptioner : public ObjectCaptioner {
 public:
  using Fn = std::function<std::string(const Image&, const Mask&)>;
  MockObjectCaptioner(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string id() const override { return id_; }
  std::string caption(const Image& crop, const Mask& crop_mask) const override { return fn_(crop, crop_mask); }

 private:
  std::string id_;
  Fn fn_;
};

class MockCaptionValidator : public CaptionValidator {
 public:
  using Fn = std::function<Verdict(const std::string&, const Image&)>;
  MockCaptionValidator(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string id() const override { return id_; }
  Verdict validate(const std::string& caption, const Image& crop) const override { return fn_(caption, crop); }

 private:
  std::string id_;
  Fn fn_;
};

class MockContextCaptioner : public ContextCaptioner {
 public:
  using Fn = std::function<std::string(const Image&, const BBox&)>;
  MockContextCaptioner(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string id() const override { return id_; }
  std::string describe(const Image& image, const BBox& box) const override { return fn_(image, box); }

 private:
  std::string id_;
  Fn fn_;
};

class MockCaptionMerger : public CaptionMerger {
 public:
  using Fn = std::function<std::string(const std::string&, const std::string&)>;
  MockCaptionMerger(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  // Default template: "<object>, <context>".
  explicit MockCaptionMerger(std::string id);
  std::string id() const override { return id_; }
  std::string merge(const std::string& o, const std::string& c) const override { return fn_(o, c); }

 private:
  std::string id_;
  Fn fn_;
};

// Deterministic offline suite: describes the crop by its dominant palette
// color and the box by its grid position; accepts every non-empty caption.
AnnotatorSuite make_heuristic_suite();

struct HttpClientConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{100};
  double backoff_multiplier = 2.0;
  std::chrono::milliseconds timeout{30000};
};

// Remote annotator speaking JSON over HTTP POST:
//   /object_caption {image, mask}          -> {text}
//   /validate       {caption, image}       -> {verdict}
//   /context_caption {image, bbox}         -> {text}
//   /merge          {object, context}      -> {text}
// Images travel as base64-encoded PPM, masks as RLE arrays. Connection
// failures, 429 and 5xx are retried with exponential backoff; other
// statuses fail immediately.
class HttpAnnotatorClient : public ObjectCaptioner,
                            public CaptionValidator,
                            public ContextCaptioner,
                            public CaptionMerger {
 public:
  explicit HttpAnnotatorClient(HttpClientConfig config);
  std::string id() const override { return "http:" + config_.base_url; }
  std::string caption(const Image& crop, const Mask& crop_mask) const override;
  Verdict validate(const std::string& caption, const Image& crop) const override;
  std::string describe(const Image& image, const BBox& box) const override;
  std::string merge(const std::string& object_caption, const std::string& context_caption) const override;

 private:
  std::string post(const std::string& path, const std::string& body) const;

  HttpClientConfig config_;
};

AnnotatorSuite make_http_suite(const HttpClientConfig& config);

}  // namespace pixlab
