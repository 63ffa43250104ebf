#pragma once

#include "pixlab/model.hpp"
#include "pixlab/synthetic.hpp"
#include "pixlab/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace pixlab {

// Immutable set of unit-norm candidate embeddings with unique ids.
class RetrievalIndex {
 public:
  static RetrievalIndex build(const EmbeddingBatch& embeddings, std::vector<std::string> ids);

  const EmbeddingBatch& embeddings() const { return embeddings_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  // Position of `id`, or -1.
  long find(const std::string& id) const;

 private:
  RetrievalIndex() = default;
  EmbeddingBatch embeddings_;
  std::vector<std::string> ids_;
  std::map<std::string, long> lookup_;
};

enum class Direction { kM2T, kT2M, kI2T, kT2I };
std::string_view to_string(Direction d);

struct RetrievalReport {
  Direction direction = Direction::kM2T;
  std::map<int, double> recall_at;
  long n_queries = 0;
};

// A query hits at k when its ground-truth candidate ranks among the k most
// cosine-similar candidates; equal scores rank by lower index.
RetrievalReport recall_at_k(const EmbeddingBatch& queries, const RetrievalIndex& index,
                            const std::vector<std::string>& ground_truth, const std::vector<int>& ks,
                            Direction direction);

// Batched inference over many inputs.
EmbeddingBatch embed_masked_images(const PixModel& model, std::span<const MaskedImage> inputs);
EmbeddingBatch embed_texts(const PixModel& model, std::span<const std::string> texts);

// Each sample's (image, mask) against its long caption, both directions.
std::pair<RetrievalReport, RetrievalReport> mask_text_retrieval(const PixModel& model,
                                                                std::span<const TrainingSample> samples,
                                                                const std::vector<int>& ks);
// Whole images (all-ones mask) against global captions, both directions.
std::pair<RetrievalReport, RetrievalReport> image_text_retrieval(const PixModel& model,
                                                                 std::span<const TrainingSample> samples,
                                                                 const std::vector<int>& ks);

// Indices of the k candidates most cosine-similar to `query`, best first,
// ties to the lower index.
std::vector<int> top_k_by_cosine(const Embedding& query, const EmbeddingBatch& candidates, int k);

enum class ClassifyProtocol { kVisualPrompt, kCrop };

struct ClassifyOptions {
  ClassifyProtocol protocol = ClassifyProtocol::kVisualPrompt;
  int k = 1;
  double enlarge = 1.5;
  std::string prompt_template = "{}";  // "{}" is replaced by the class name
};

std::vector<int> zero_shot_classify(const PixModel& model, const Image& image, const Mask& mask,
                                    const std::vector<std::string>& class_names, const ClassifyOptions& options);

double mask_iou(const Mask& a, const Mask& b);

// Argmax of cosine(visual row, text); ties to the lowest index.
int select_best(const EmbeddingBatch& visual, const Embedding& text);
int rec_select(const PixModel& model, const Image& image, std::span<const Mask> candidates, const std::string& text);

struct RecOptions {
  int candidates = 4;
  double iou_threshold = 0.5;
};

struct RecReport {
  long n = 0;
  double success_rate = 0.0;  // IoU >= threshold
  double exact_rate = 0.0;    // IoU == 1
};

// Per image: the shapes it contains, padded to `candidates` with masks of
// shapes from other images that do not touch any object here.
std::vector<std::vector<Mask>> rec_candidates(const std::vector<SyntheticSample>& samples, int count);
RecReport evaluate_rec(const PixModel& model, const std::vector<SyntheticSample>& samples, const RecOptions& options);

struct AttentionMap {
  int grid = 0;
  Matrix per_head;          // heads x G*G, each row sums to 1
  Eigen::RowVectorXd mean;  // head average, G*G
};

// Class-token attention over patches in the final block.
AttentionMap class_attention_map(const PixModel& model, const MaskedImage& input);
// Writes the map, scaled to 0..255 and nearest-upsampled to the input
// resolution, as an 8-bit PGM. Returns the pixels written.
std::vector<std::uint8_t> export_attention_map(const PixModel& model, const MaskedImage& input,
                                               const std::filesystem::path& output);

nlohmann::ordered_json report_to_json(const RetrievalReport& report);

}  // namespace pixlab
