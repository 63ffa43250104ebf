#pragma once

#include "pixlab/annotators.hpp"
#include "pixlab/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pixlab {

enum class RecordStatus { kAccepted, kRejected, kFailed };

std::string_view to_string(RecordStatus s);

struct Provenance {
  std::string object_captioner;
  std::string validator;
  std::string context_captioner;
  std::string merger;
  std::string started_at;  // ISO-8601 UTC
  std::string finished_at;
};

struct LongGritRecord {
  std::string image_ref;
  Mask mask;
  BBox bbox;
  std::string object_caption;
  std::string context_caption;
  std::string merged_caption;
  std::optional<Verdict> verdict;  // unset when stage 1 failed before validation
  RecordStatus status = RecordStatus::kFailed;
  std::string failed_stage;  // "object_caption", "validate", "context_caption" or "merge"
  std::string error;
  Provenance provenance;
};

// One sample through the three stages. Client failures are captured in the
// record rather than thrown; an empty mask is a ValidationError.
LongGritRecord annotate_sample(const std::string& image_ref, const Image& image, const Mask& mask,
                               const AnnotatorSuite& suite);

nlohmann::ordered_json record_to_json(const LongGritRecord& r, bool include_timestamps = true);
LongGritRecord record_from_json(const nlohmann::json& j);

struct ManifestEntry {
  std::string image_ref;
  Mask mask;
};

// Line-delimited {image_ref, mask}; throws on the first bad line.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct PipelineStats {
  long accepted = 0;
  long rejected = 0;
  long failed = 0;
  double wall_time = 0.0;  // seconds
};

using ImageLoader = std::function<Image(const std::string& image_ref)>;

// Resolves image_ref as a PPM path relative to `base`.
ImageLoader ppm_loader(std::filesystem::path base);

// Annotates every manifest entry with up to `concurrency` workers and writes
// one record per line in manifest order, plus stats to <output>.stats.json.
PipelineStats run_pipeline(const std::filesystem::path& manifest, const AnnotatorSuite& suite,
                           const std::filesystem::path& output, int concurrency, const ImageLoader& loader = {});

std::vector<LongGritRecord> read_records(const std::filesystem::path& path);

// Only accepted records become training samples; the global caption joins
// all accepted merged captions of the same image.
std::vector<TrainingSample> dataset_from_records(const std::vector<LongGritRecord>& records,
                                                 const ImageLoader& loader, double enlarge);

}  // namespace pixlab
