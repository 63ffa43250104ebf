#include "pixlab/pipeline.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <fstream>
#include <thread>

using namespace pixlab;
using pixlab::testing::random_image;
using pixlab::testing::rect_mask;
using pixlab::testing::TempDir;

namespace {

AnnotatorSuite fixed_suite(std::string object, Verdict verdict, std::string context) {
  AnnotatorSuite s;
  s.object_captioner = std::make_shared<MockObjectCaptioner>(
      "obj-v1", [object](const Image&, const Mask&) { return object; });
  s.validator = std::make_shared<MockCaptionValidator>("val-v1", [verdict](const std::string&, const Image&) {
    return verdict;
  });
  s.context_captioner = std::make_shared<MockContextCaptioner>(
      "ctx-v1", [context](const Image&, const BBox&) { return context; });
  s.merger = std::make_shared<MockCaptionMerger>("merge-v1");
  return s;
}

// Manifest of n 8x8 images; entry i's image_ref is "img<i>".
std::vector<ManifestEntry> small_manifest(int n) {
  std::vector<ManifestEntry> out;
  for (int i = 0; i < n; ++i) out.push_back({"img" + std::to_string(i), rect_mask(8, 8, i % 4, 1, 4 + i % 4, 5)});
  return out;
}

ImageLoader synthetic_loader() {
  return [](const std::string& ref) {
    std::mt19937_64 rng(std::hash<std::string>{}(ref));
    return random_image(rng, 8, 8);
  };
}

std::string without_timestamps(const std::filesystem::path& records) {
  std::string out;
  for (const auto& r : read_records(records)) out += record_to_json(r, false).dump() + "\n";
  return out;
}

}  // namespace

TEST(Annotate, MergesObjectAndContext) {
  std::mt19937_64 rng(1);
  const auto suite = fixed_suite("a decorative lantern", Verdict::kConsistent, "the leftmost object on a mantelpiece");
  const LongGritRecord r = annotate_sample("x.ppm", random_image(rng, 8, 8), rect_mask(8, 8, 2, 1, 5, 3), suite);
  EXPECT_EQ(r.status, RecordStatus::kAccepted);
  EXPECT_EQ(r.merged_caption, "a decorative lantern, the leftmost object on a mantelpiece");
  EXPECT_EQ(r.object_caption, "a decorative lantern");
  EXPECT_EQ(r.bbox, (BBox{2, 1, 5, 3}));
  EXPECT_EQ(r.provenance.object_captioner, "obj-v1");
  EXPECT_EQ(r.provenance.merger, "merge-v1");
  EXPECT_EQ(r.provenance.started_at.size(), 24u);
  EXPECT_EQ(r.provenance.started_at.back(), 'Z');
}

TEST(Annotate, CropHandedToCaptionerIsTheBox) {
  std::mt19937_64 rng(2);
  const Image img = random_image(rng, 8, 8);
  AnnotatorSuite s = fixed_suite("o", Verdict::kConsistent, "c");
  Image seen;
  s.object_captioner = std::make_shared<MockObjectCaptioner>("o", [&seen](const Image& crop, const Mask& m) {
    seen = crop;
    EXPECT_EQ(m.count(), 12u);
    return std::string("obj");
  });
  annotate_sample("x", img, rect_mask(8, 8, 2, 1, 5, 3), s);
  ASSERT_EQ(seen.height, 4);
  ASSERT_EQ(seen.width, 3);
  EXPECT_EQ(seen.at(0, 0, 2), img.at(2, 1, 2));
  EXPECT_EQ(seen.at(3, 2, 0), img.at(5, 3, 0));
}

TEST(Annotate, GateRejectsWithoutLaterStages) {
  std::mt19937_64 rng(3);
  for (Verdict v : {Verdict::kInconsistent, Verdict::kInvalid}) {
    AnnotatorSuite s = fixed_suite("a dog", v, "unused");
    std::atomic<int> later{0};
    s.context_captioner = std::make_shared<MockContextCaptioner>("c", [&later](const Image&, const BBox&) {
      ++later;
      return std::string("ctx");
    });
    const auto r = annotate_sample("x", random_image(rng, 8, 8), rect_mask(8, 8, 0, 0, 3, 3), s);
    EXPECT_EQ(r.status, RecordStatus::kRejected);
    EXPECT_EQ(r.verdict, v);
    EXPECT_TRUE(r.merged_caption.empty());
    EXPECT_EQ(later.load(), 0);
  }
}

TEST(Annotate, FailuresRecordTheStage) {
  std::mt19937_64 rng(4);
  const Image img = random_image(rng, 8, 8);
  const Mask m = rect_mask(8, 8, 0, 0, 3, 3);
  AnnotatorSuite s = fixed_suite("o", Verdict::kConsistent, "c");
  s.validator = std::make_shared<MockCaptionValidator>("v", [](const std::string&, const Image&) -> Verdict {
    throw AnnotatorError("validator offline");
  });
  auto r = annotate_sample("x", img, m, s);
  EXPECT_EQ(r.status, RecordStatus::kFailed);
  EXPECT_EQ(r.failed_stage, "validate");
  EXPECT_EQ(r.error, "validator offline");

  s = fixed_suite("o", Verdict::kConsistent, "c");
  s.merger = std::make_shared<MockCaptionMerger>("m", [](const std::string&, const std::string&) -> std::string {
    throw AnnotatorError("merge timeout");
  });
  r = annotate_sample("x", img, m, s);
  EXPECT_EQ(r.failed_stage, "merge");
  EXPECT_EQ(r.context_caption, "c");

  EXPECT_THROW(annotate_sample("x", img, Mask(8, 8), s), ValidationError);
  EXPECT_THROW(annotate_sample("x", img, Mask(8, 7, 1.0), s), ShapeError);
}

TEST(Records, JsonRoundTrip) {
  std::mt19937_64 rng(5);
  const auto suite = fixed_suite("a cup", Verdict::kConsistent, "on a table");
  const auto r = annotate_sample("im.ppm", random_image(rng, 8, 8), rect_mask(8, 8, 1, 1, 2, 6), suite);
  const auto back = record_from_json(record_to_json(r));
  EXPECT_EQ(record_to_json(back).dump(), record_to_json(r).dump());
  EXPECT_FALSE(record_to_json(r, false)["provenance"].contains("timestamps"));
  EXPECT_FALSE(record_to_json(r).contains("failed_stage"));
}

TEST(Pipeline, EmptyManifestGivesEmptyOutput) {
  TempDir dir("pipe");
  write_manifest(dir.path / "m.jsonl", {});
  const auto stats = run_pipeline(dir.path / "m.jsonl", make_heuristic_suite(), dir.path / "out.jsonl", 4);
  EXPECT_EQ(stats.accepted + stats.rejected + stats.failed, 0);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "out.jsonl"));
  EXPECT_EQ(std::filesystem::file_size(dir.path / "out.jsonl"), 0u);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "out.jsonl.stats.json"));
}

TEST(Pipeline, HalfRejectedByValidator) {
  TempDir dir("pipe");
  AnnotatorSuite s = fixed_suite("o", Verdict::kConsistent, "c");
  // Even entries fail validation.
  s.object_captioner = std::make_shared<MockObjectCaptioner>("o", [](const Image& crop, const Mask&) {
    return crop.height % 2 == 0 ? std::string("even") : std::string("odd");
  });
  s.validator = std::make_shared<MockCaptionValidator>("v", [](const std::string& cap, const Image&) {
    return cap == "odd" ? Verdict::kConsistent : Verdict::kInconsistent;
  });
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 10; ++i) entries.push_back({"img" + std::to_string(i), rect_mask(8, 8, 0, 0, i % 2 == 0 ? 1 : 2, 3)});
  write_manifest(dir.path / "m.jsonl", entries);
  const auto stats = run_pipeline(dir.path / "m.jsonl", s, dir.path / "out.jsonl", 3, synthetic_loader());
  EXPECT_EQ(stats.accepted, 5);
  EXPECT_EQ(stats.rejected, 5);
  EXPECT_EQ(stats.failed, 0);
  const auto records = read_records(dir.path / "out.jsonl");
  ASSERT_EQ(records.size(), 10u);
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(records[static_cast<std::size_t>(i)].image_ref, "img" + std::to_string(i));
    EXPECT_EQ(records[static_cast<std::size_t>(i)].status, i % 2 == 0 ? RecordStatus::kRejected : RecordStatus::kAccepted);
  }
  const auto stats_json = nlohmann::json::parse(pixlab::testing::read_file(dir.path / "out.jsonl.stats.json"));
  EXPECT_EQ(stats_json.at("accepted"), 5);
  EXPECT_EQ(stats_json.at("rejected"), 5);
}

TEST(Pipeline, ConcurrencyDoesNotChangeOutput) {
  TempDir dir("pipe");
  write_manifest(dir.path / "m.jsonl", small_manifest(24));
  const auto suite = make_heuristic_suite();
  run_pipeline(dir.path / "m.jsonl", suite, dir.path / "one.jsonl", 1, synthetic_loader());
  run_pipeline(dir.path / "m.jsonl", suite, dir.path / "four.jsonl", 4, synthetic_loader());
  EXPECT_EQ(without_timestamps(dir.path / "one.jsonl"), without_timestamps(dir.path / "four.jsonl"));
}

TEST(Pipeline, LoadFailuresAreRecorded) {
  TempDir dir("pipe");
  write_manifest(dir.path / "m.jsonl", small_manifest(3));
  ImageLoader loader = [](const std::string& ref) -> Image {
    if (ref == "img1") throw std::runtime_error("missing file");
    std::mt19937_64 rng(1);
    return random_image(rng, 8, 8);
  };
  const auto stats = run_pipeline(dir.path / "m.jsonl", make_heuristic_suite(), dir.path / "out.jsonl", 2, loader);
  EXPECT_EQ(stats.failed, 1);
  const auto records = read_records(dir.path / "out.jsonl");
  EXPECT_EQ(records[1].failed_stage, "load");
  EXPECT_EQ(records[1].error, "missing file");
}

TEST(Pipeline, ManifestErrorsNameTheLine) {
  TempDir dir("pipe");
  {
    std::ofstream out(dir.path / "m.jsonl");
    out << R"({"image_ref": "a", "mask": [2, 2, 0, 1]})" << "\n" << "not json\n";
  }
  try {
    read_manifest(dir.path / "m.jsonl");
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, OnlyAcceptedRecordsBecomeTrainingData) {
  std::mt19937_64 rng(6);
  const Image img = random_image(rng, 8, 8);
  std::vector<LongGritRecord> records;
  const auto ok = fixed_suite("a lamp", Verdict::kConsistent, "near the door");
  const auto bad = fixed_suite("a cat", Verdict::kInconsistent, "x");
  records.push_back(annotate_sample("a", img, rect_mask(8, 8, 0, 0, 2, 2), ok));
  records.push_back(annotate_sample("a", img, rect_mask(8, 8, 4, 4, 6, 6), bad));
  records.push_back(annotate_sample("a", img, rect_mask(8, 8, 4, 0, 7, 2), ok));
  const auto data = dataset_from_records(records, [&](const std::string&) { return img; }, 1.5);
  ASSERT_EQ(data.size(), 2u);
  for (const auto& s : data) {
    EXPECT_EQ(s.long_caption, "a lamp, near the door");
    EXPECT_EQ(s.short_caption, "a lamp");
    EXPECT_EQ(s.global_caption, "a lamp, near the door; a lamp, near the door");
  }
}

TEST(HttpClient, RetriesTransientFailures) {
  httplib::Server server;
  std::atomic<int> calls{0};
  server.Post("/object_caption", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    EXPECT_TRUE(body.contains("image"));
    EXPECT_TRUE(body.contains("mask"));
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"text": "a red ball"})", "application/json");
  });
  server.Post("/validate", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"verdict": "consistent"})", "application/json");
  });
  server.Post("/context_caption", [&](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpClientConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.initial_backoff = std::chrono::milliseconds(1);
  cfg.timeout = std::chrono::milliseconds(2000);
  HttpAnnotatorClient client(cfg);
  std::mt19937_64 rng(7);
  EXPECT_EQ(client.caption(random_image(rng, 4, 4), Mask(4, 4, 1.0)), "a red ball");
  EXPECT_EQ(calls.load(), 3);
  EXPECT_EQ(client.validate("a red ball", random_image(rng, 4, 4)), Verdict::kConsistent);
  // 4xx fails without retry.
  EXPECT_THROW(client.describe(random_image(rng, 4, 4), BBox{0, 0, 1, 1}), AnnotatorError);

  calls = -10;
  cfg.max_attempts = 2;
  EXPECT_THROW(HttpAnnotatorClient(cfg).caption(random_image(rng, 4, 4), Mask(4, 4, 1.0)), AnnotatorError);
  EXPECT_EQ(calls.load(), -8);

  server.stop();
  t.join();
}
