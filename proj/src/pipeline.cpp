#include "pixlab/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace pixlab {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::kAccepted:
      return "accepted";
    case RecordStatus::kRejected:
      return "rejected";
    case RecordStatus::kFailed:
      return "failed";
  }
  return "failed";
}

namespace {

RecordStatus status_from_string(std::string_view s) {
  if (s == "accepted") return RecordStatus::kAccepted;
  if (s == "rejected") return RecordStatus::kRejected;
  if (s == "failed") return RecordStatus::kFailed;
  throw ValidationError("unknown record status '" + std::string(s) + "'");
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

LongGritRecord annotate_sample(const std::string& image_ref, const Image& image, const Mask& mask,
                               const AnnotatorSuite& suite) {
  suite.validate();
  LongGritRecord r;
  r.image_ref = image_ref;
  r.mask = binarize(mask);
  r.provenance.object_captioner = suite.object_captioner->id();
  r.provenance.validator = suite.validator->id();
  r.provenance.context_captioner = suite.context_captioner->id();
  r.provenance.merger = suite.merger->id();
  r.provenance.started_at = utc_now();
  if (image.height != mask.height || image.width != mask.width) {
    throw ShapeError("annotate_sample: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " vs mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  r.bbox = mask_to_bbox(r.mask);

  const char* stage = "object_caption";
  try {
    const Crop crop = derive_crop(image, r.mask, 1.0, r.bbox.height(), r.bbox.width());
    r.object_caption = suite.object_captioner->caption(crop.image, crop.mask);
    stage = "validate";
    r.verdict = suite.validator->validate(r.object_caption, crop.image);
    if (*r.verdict != Verdict::kConsistent) {
      r.status = RecordStatus::kRejected;
    } else {
      stage = "context_caption";
      r.context_caption = suite.context_captioner->describe(image, r.bbox);
      stage = "merge";
      r.merged_caption = suite.merger->merge(r.object_caption, r.context_caption);
      if (r.merged_caption.empty()) throw AnnotatorError("merger returned an empty caption");
      r.status = RecordStatus::kAccepted;
    }
  } catch (const std::exception& e) {
    r.status = RecordStatus::kFailed;
    r.failed_stage = stage;
    r.error = e.what();
    r.merged_caption.clear();
  }
  r.provenance.finished_at = utc_now();
  return r;
}

ordered_json record_to_json(const LongGritRecord& r, bool include_timestamps) {
  ordered_json j;
  j["image_ref"] = r.image_ref;
  j["mask"] = encode_rle(r.mask);
  j["bbox"] = {r.bbox.row_min, r.bbox.col_min, r.bbox.row_max, r.bbox.col_max};
  j["object_caption"] = r.object_caption;
  j["context_caption"] = r.context_caption;
  j["merged_caption"] = r.merged_caption;
  j["verdict"] = r.verdict ? ordered_json(std::string(to_string(*r.verdict))) : ordered_json(nullptr);
  j["status"] = std::string(to_string(r.status));
  if (r.status == RecordStatus::kFailed) {
    j["failed_stage"] = r.failed_stage;
    j["error"] = r.error;
  }
  ordered_json prov;
  prov["object_captioner"] = r.provenance.object_captioner;
  prov["validator"] = r.provenance.validator;
  prov["context_captioner"] = r.provenance.context_captioner;
  prov["merger"] = r.provenance.merger;
  if (include_timestamps) {
    prov["timestamps"] = {{"started_at", r.provenance.started_at}, {"finished_at", r.provenance.finished_at}};
  }
  j["provenance"] = std::move(prov);
  return j;
}

LongGritRecord record_from_json(const json& j) {
  LongGritRecord r;
  r.image_ref = j.at("image_ref").get<std::string>();
  r.mask = decode_rle(j.at("mask").get<std::vector<std::int64_t>>());
  const auto box = j.at("bbox").get<std::vector<int>>();
  if (box.size() != 4) throw ValidationError("bbox must have 4 entries");
  r.bbox = BBox{box[0], box[1], box[2], box[3]};
  r.object_caption = j.at("object_caption").get<std::string>();
  r.context_caption = j.at("context_caption").get<std::string>();
  r.merged_caption = j.at("merged_caption").get<std::string>();
  if (!j.at("verdict").is_null()) r.verdict = verdict_from_string(j.at("verdict").get<std::string>());
  r.status = status_from_string(j.at("status").get<std::string>());
  r.failed_stage = j.value("failed_stage", "");
  r.error = j.value("error", "");
  const json& prov = j.at("provenance");
  r.provenance.object_captioner = prov.value("object_captioner", "");
  r.provenance.validator = prov.value("validator", "");
  r.provenance.context_captioner = prov.value("context_captioner", "");
  r.provenance.merger = prov.value("merger", "");
  if (prov.contains("timestamps")) {
    r.provenance.started_at = prov["timestamps"].value("started_at", "");
    r.provenance.finished_at = prov["timestamps"].value("finished_at", "");
  }
  return r;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.image_ref = j.at("image_ref").get<std::string>();
      e.mask = decode_rle(j.at("mask").get<std::vector<std::int64_t>>());
      entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  for (const ManifestEntry& e : entries) {
    ordered_json j;
    j["image_ref"] = e.image_ref;
    j["mask"] = encode_rle(e.mask);
    out << j.dump() << '\n';
  }
  write_atomically(path, out.str());
}

ImageLoader ppm_loader(std::filesystem::path base) {
  return [base = std::move(base)](const std::string& ref) { return load_ppm(base / ref); };
}

PipelineStats run_pipeline(const std::filesystem::path& manifest, const AnnotatorSuite& suite,
                           const std::filesystem::path& output, int concurrency, const ImageLoader& loader) {
  const auto start = std::chrono::steady_clock::now();
  if (concurrency < 1) throw ValidationError("concurrency must be >= 1");
  suite.validate();
  const std::vector<ManifestEntry> entries = read_manifest(manifest);
  const ImageLoader load = loader ? loader : ppm_loader(manifest.parent_path());

  std::vector<LongGritRecord> records(entries.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      const ManifestEntry& e = entries[i];
      const char* stage = "load";
      try {
        const Image image = load(e.image_ref);
        stage = "input";
        records[i] = annotate_sample(e.image_ref, image, e.mask, suite);
        continue;
      } catch (const std::exception& ex) {
        LongGritRecord r;
        r.image_ref = e.image_ref;
        r.mask = binarize(e.mask);
        r.status = RecordStatus::kFailed;
        r.failed_stage = stage;
        r.error = ex.what();
        r.provenance.object_captioner = suite.object_captioner->id();
        r.provenance.validator = suite.validator->id();
        r.provenance.context_captioner = suite.context_captioner->id();
        r.provenance.merger = suite.merger->id();
        if (!r.mask.empty()) r.bbox = mask_to_bbox(r.mask);
        records[i] = std::move(r);
      }
    }
  };
  const int n_threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(concurrency), entries.size()));
  std::vector<std::thread> threads;
  for (int t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  PipelineStats stats;
  std::ostringstream out;
  for (const LongGritRecord& r : records) {
    switch (r.status) {
      case RecordStatus::kAccepted:
        ++stats.accepted;
        break;
      case RecordStatus::kRejected:
        ++stats.rejected;
        break;
      case RecordStatus::kFailed:
        ++stats.failed;
        break;
    }
    out << record_to_json(r).dump() << '\n';
  }
  write_atomically(output, out.str());
  stats.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  ordered_json js;
  js["accepted"] = stats.accepted;
  js["rejected"] = stats.rejected;
  js["failed"] = stats.failed;
  js["wall_time"] = stats.wall_time;
  std::filesystem::path stats_path = output;
  stats_path += ".stats.json";
  write_atomically(stats_path, js.dump(2) + "\n");
  return stats;
}

std::vector<LongGritRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records " + path.string());
  std::vector<LongGritRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::vector<TrainingSample> dataset_from_records(const std::vector<LongGritRecord>& records,
                                                 const ImageLoader& loader, double enlarge) {
  auto usable = [](const LongGritRecord& r) {
    return r.status == RecordStatus::kAccepted && r.verdict == Verdict::kConsistent && !r.merged_caption.empty();
  };
  std::map<std::string, std::string> global;
  for (const LongGritRecord& r : records) {
    if (!usable(r)) continue;
    std::string& g = global[r.image_ref];
    g += g.empty() ? r.merged_caption : "; " + r.merged_caption;
  }
  std::map<std::string, Image> images;
  std::vector<TrainingSample> out;
  for (const LongGritRecord& r : records) {
    if (!usable(r)) continue;
    auto it = images.find(r.image_ref);
    if (it == images.end()) it = images.emplace(r.image_ref, loader(r.image_ref)).first;
    out.push_back(make_training_sample(it->second, r.mask, r.merged_caption, r.object_caption, global[r.image_ref],
                                       enlarge));
  }
  return out;
}

}  // namespace pixlab
