#include "pixlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace pixlab {

using autodiff::Tape;

namespace {

constexpr std::size_t kInferenceBatch = 32;

Embedding unit(const Embedding& v, const std::string& what) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError(what + " has zero or non-finite norm");
  return v / n;
}

}  // namespace

RetrievalIndex RetrievalIndex::build(const EmbeddingBatch& embeddings, std::vector<std::string> ids) {
  if (embeddings.rows() != static_cast<Eigen::Index>(ids.size())) {
    throw ShapeError("build_index: " + std::to_string(embeddings.rows()) + " embeddings but " +
                     std::to_string(ids.size()) + " ids");
  }
  RetrievalIndex index;
  index.embeddings_.resize(embeddings.rows(), embeddings.cols());
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    index.embeddings_.row(i) = unit(embeddings.row(i), "build_index: embedding " + std::to_string(i));
    if (!index.lookup_.emplace(ids[static_cast<std::size_t>(i)], static_cast<long>(i)).second) {
      throw ValidationError("build_index: duplicate id '" + ids[static_cast<std::size_t>(i)] + "'");
    }
  }
  index.ids_ = std::move(ids);
  return index;
}

long RetrievalIndex::find(const std::string& id) const {
  auto it = lookup_.find(id);
  return it == lookup_.end() ? -1 : it->second;
}

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::kM2T:
      return "M2T";
    case Direction::kT2M:
      return "T2M";
    case Direction::kI2T:
      return "I2T";
    case Direction::kT2I:
      return "T2I";
  }
  return "?";
}

RetrievalReport recall_at_k(const EmbeddingBatch& queries, const RetrievalIndex& index,
                            const std::vector<std::string>& ground_truth, const std::vector<int>& ks,
                            Direction direction) {
  if (queries.rows() != static_cast<Eigen::Index>(ground_truth.size())) {
    throw ShapeError("recall_at_k: " + std::to_string(queries.rows()) + " queries but " +
                     std::to_string(ground_truth.size()) + " ground-truth ids");
  }
  if (queries.rows() > 0 && queries.cols() != index.embeddings().cols()) {
    throw ShapeError("recall_at_k: query dim " + std::to_string(queries.cols()) + " vs index dim " +
                     std::to_string(index.embeddings().cols()));
  }
  for (int k : ks) {
    if (k < 1) throw ValidationError("recall_at_k: k must be >= 1");
  }
  std::vector<long> ranks(ground_truth.size());
  for (std::size_t q = 0; q < ground_truth.size(); ++q) {
    const long target = index.find(ground_truth[q]);
    if (target < 0) {
      throw ValidationError("recall_at_k: query " + std::to_string(q) + " ground truth '" + ground_truth[q] +
                            "' is not in the index");
    }
    const Embedding query = unit(queries.row(static_cast<Eigen::Index>(q)), "query " + std::to_string(q));
    const Eigen::VectorXd sims = index.embeddings() * query.transpose();
    const double s = sims(target);
    long rank = 0;
    for (Eigen::Index c = 0; c < sims.size(); ++c) {
      if (sims(c) > s || (sims(c) == s && c < target)) ++rank;
    }
    ranks[q] = rank;
  }
  RetrievalReport report;
  report.direction = direction;
  report.n_queries = static_cast<long>(ground_truth.size());
  for (int k : ks) {
    if (ranks.empty()) {
      report.recall_at[k] = 0.0;
      continue;
    }
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](long r) { return r < k; });
    report.recall_at[k] = static_cast<double>(hits) / static_cast<double>(ranks.size());
  }
  return report;
}

EmbeddingBatch embed_masked_images(const PixModel& model, std::span<const MaskedImage> inputs) {
  EmbeddingBatch out(static_cast<Eigen::Index>(inputs.size()), model.config().vision.proj_dim);
  for (std::size_t start = 0; start < inputs.size(); start += kInferenceBatch) {
    const std::size_t n = std::min(kInferenceBatch, inputs.size() - start);
    Tape tape(false);
    try {
      auto result = model.vision().forward(tape, inputs.subspan(start, n));
      out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = result.global.value();
    } catch (const std::invalid_argument& e) {
      throw ValidationError("inputs " + std::to_string(start) + ".." + std::to_string(start + n - 1) + ": " +
                            e.what());
    }
  }
  return out;
}

EmbeddingBatch embed_texts(const PixModel& model, std::span<const std::string> texts) {
  EmbeddingBatch out(static_cast<Eigen::Index>(texts.size()), model.config().text.proj_dim);
  for (std::size_t start = 0; start < texts.size(); start += kInferenceBatch) {
    const std::size_t n = std::min(kInferenceBatch, texts.size() - start);
    Tape tape(false);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        model.text().forward(tape, texts.subspan(start, n)).value();
  }
  return out;
}

namespace {

std::pair<RetrievalReport, RetrievalReport> paired_retrieval(const EmbeddingBatch& visual, const EmbeddingBatch& text,
                                                             const std::vector<int>& ks, Direction v2t,
                                                             Direction t2v) {
  std::vector<std::string> ids(static_cast<std::size_t>(visual.rows()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
  const RetrievalIndex text_index = RetrievalIndex::build(text, ids);
  const RetrievalIndex visual_index = RetrievalIndex::build(visual, ids);
  return {recall_at_k(visual, text_index, ids, ks, v2t), recall_at_k(text, visual_index, ids, ks, t2v)};
}

}  // namespace

std::pair<RetrievalReport, RetrievalReport> mask_text_retrieval(const PixModel& model,
                                                                std::span<const TrainingSample> samples,
                                                                const std::vector<int>& ks) {
  std::vector<MaskedImage> inputs;
  std::vector<std::string> captions;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].long_caption.empty()) throw ValidationError("sample " + std::to_string(i) + " has no caption");
    inputs.push_back(samples[i].input);
    captions.push_back(samples[i].long_caption);
  }
  return paired_retrieval(embed_masked_images(model, inputs), embed_texts(model, captions), ks, Direction::kM2T,
                          Direction::kT2M);
}

std::pair<RetrievalReport, RetrievalReport> image_text_retrieval(const PixModel& model,
                                                                 std::span<const TrainingSample> samples,
                                                                 const std::vector<int>& ks) {
  std::vector<MaskedImage> inputs;
  std::vector<std::string> captions;
  for (const TrainingSample& s : samples) {
    inputs.push_back(MaskedImage{s.input.pixels, all_ones_mask(s.input.pixels.height, s.input.pixels.width)});
    captions.push_back(s.global_caption);
  }
  return paired_retrieval(embed_masked_images(model, inputs), embed_texts(model, captions), ks, Direction::kI2T,
                          Direction::kT2I);
}

std::vector<int> top_k_by_cosine(const Embedding& query, const EmbeddingBatch& candidates, int k) {
  if (candidates.rows() == 0) throw ValidationError("top_k_by_cosine: no candidates");
  if (k < 1) throw ValidationError("top_k_by_cosine: k must be >= 1");
  if (query.size() != candidates.cols()) throw ShapeError("top_k_by_cosine: dimension mismatch");
  const Embedding q = unit(query, "query");
  std::vector<double> sims(static_cast<std::size_t>(candidates.rows()));
  for (Eigen::Index i = 0; i < candidates.rows(); ++i) {
    sims[static_cast<std::size_t>(i)] = q.dot(unit(candidates.row(i), "candidate " + std::to_string(i)));
  }
  std::vector<int> order(sims.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sims[a] > sims[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(k)));
  return order;
}

std::vector<int> zero_shot_classify(const PixModel& model, const Image& image, const Mask& mask,
                                    const std::vector<std::string>& class_names, const ClassifyOptions& options) {
  if (class_names.empty()) throw ValidationError("zero_shot_classify: no class prompts");
  const std::size_t slot = options.prompt_template.find("{}");
  if (slot == std::string::npos) throw ValidationError("prompt template must contain {}");
  std::vector<std::string> prompts;
  for (const std::string& name : class_names) {
    std::string p = options.prompt_template;
    prompts.push_back(p.replace(slot, 2, name));
  }
  MaskedImage input;
  if (options.protocol == ClassifyProtocol::kVisualPrompt) {
    input = make_masked_image(image, mask);
  } else {
    const int res = model.config().vision.input_resolution;
    Crop crop = derive_crop(image, binarize(mask), options.enlarge, res, res);
    input = make_masked_image(std::move(crop.image), all_ones_mask(res, res));
  }
  const Embedding visual = infer_embedding(model, input);
  return top_k_by_cosine(visual, embed_texts(model, prompts), options.k);
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask_iou: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] > 0.5;
    const bool y = b.data[i] > 0.5;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) throw ValidationError("mask_iou: both masks are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

int select_best(const EmbeddingBatch& visual, const Embedding& text) {
  if (visual.rows() == 0) throw ValidationError("select_best: no candidates");
  return top_k_by_cosine(text, visual, 1).front();
}

int rec_select(const PixModel& model, const Image& image, std::span<const Mask> candidates, const std::string& text) {
  if (candidates.empty()) throw ValidationError("rec_select: no candidate masks");
  std::vector<MaskedImage> inputs;
  for (const Mask& m : candidates) inputs.push_back(make_masked_image(image, m));
  return select_best(embed_masked_images(model, inputs), infer_text_embedding(model, text));
}

std::vector<std::vector<Mask>> rec_candidates(const std::vector<SyntheticSample>& samples, int count) {
  if (count < 1) throw ValidationError("rec_candidates: count must be >= 1");
  std::vector<std::vector<Mask>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SyntheticSample& s = samples[i];
    std::vector<Mask> cands;
    Mask occupied(s.image.height, s.image.width);
    for (const ShapeObject& o : s.objects) {
      cands.push_back(o.mask);
      for (std::size_t p = 0; p < o.mask.data.size(); ++p) occupied.data[p] = std::max(occupied.data[p], o.mask.data[p]);
    }
    for (std::size_t step = 1; step < samples.size() && static_cast<int>(cands.size()) < count; ++step) {
      const SyntheticSample& other = samples[(i + step) % samples.size()];
      for (const ShapeObject& o : other.objects) {
        if (static_cast<int>(cands.size()) >= count) break;
        if (o.mask.height != occupied.height || o.mask.width != occupied.width) continue;
        bool touches = false;
        for (std::size_t p = 0; p < o.mask.data.size() && !touches; ++p) {
          touches = o.mask.data[p] > 0.5 && occupied.data[p] > 0.5;
        }
        if (touches) continue;
        cands.push_back(o.mask);
        for (std::size_t p = 0; p < o.mask.data.size(); ++p) occupied.data[p] = std::max(occupied.data[p], o.mask.data[p]);
      }
    }
    if (static_cast<int>(cands.size()) > count) cands.resize(static_cast<std::size_t>(count));
    out.push_back(std::move(cands));
  }
  return out;
}

RecReport evaluate_rec(const PixModel& model, const std::vector<SyntheticSample>& samples, const RecOptions& options) {
  if (!(options.iou_threshold > 0.0 && options.iou_threshold <= 1.0)) {
    throw ValidationError("iou_threshold must lie in (0, 1]");
  }
  const auto candidates = rec_candidates(samples, std::max(options.candidates, 1));
  RecReport report;
  long success = 0;
  long exact = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& cands = candidates[i];
    const int pick = rec_select(model, samples[i].image, cands, samples[i].long_caption);
    const double iou = mask_iou(cands[static_cast<std::size_t>(pick)], samples[i].mask());
    success += iou >= options.iou_threshold;
    exact += iou == 1.0;
  }
  report.n = static_cast<long>(samples.size());
  if (report.n > 0) {
    report.success_rate = static_cast<double>(success) / static_cast<double>(report.n);
    report.exact_rate = static_cast<double>(exact) / static_cast<double>(report.n);
  }
  return report;
}

AttentionMap class_attention_map(const PixModel& model, const MaskedImage& input) {
  Tape tape(false);
  AttentionCapture capture;
  model.vision().forward(tape, std::span<const MaskedImage>(&input, 1), &capture);
  const Matrix& attn = capture.class_attention.at(0);
  AttentionMap map;
  map.grid = model.config().vision.grid();
  // Drop the class token's attention to itself and renormalize over patches.
  map.per_head = attn.rightCols(attn.cols() - 1);
  for (Eigen::Index h = 0; h < map.per_head.rows(); ++h) map.per_head.row(h) /= map.per_head.row(h).sum();
  map.mean = map.per_head.colwise().mean();
  return map;
}

std::vector<std::uint8_t> export_attention_map(const PixModel& model, const MaskedImage& input,
                                               const std::filesystem::path& output) {
  const std::filesystem::path dir = output.has_parent_path() ? output.parent_path() : ".";
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("cannot write attention map: directory " + dir.string() + " does not exist");
  }
  const AttentionMap map = class_attention_map(model, input);
  const int res = model.config().vision.input_resolution;
  const int patch = model.config().vision.patch_size;
  const double peak = map.mean.maxCoeff();
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(res) * res);
  for (int r = 0; r < res; ++r) {
    for (int c = 0; c < res; ++c) {
      const double v = map.mean((r / patch) * map.grid + c / patch) / peak;
      gray[static_cast<std::size_t>(r) * res + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  std::filesystem::path tmp = output;
  tmp += ".tmp";
  try {
    save_pgm(tmp, gray, res, res);
    std::filesystem::rename(tmp, output);
  } catch (const std::exception& e) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw ValidationError(std::string("cannot write attention map: ") + e.what());
  }
  return gray;
}

nlohmann::ordered_json report_to_json(const RetrievalReport& report) {
  nlohmann::ordered_json j;
  j["direction"] = std::string(to_string(report.direction));
  nlohmann::ordered_json ks = nlohmann::ordered_json::array();
  nlohmann::ordered_json recalls = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.recall_at) {
    ks.push_back(k);
    recalls[std::to_string(k)] = v;
  }
  j["ks"] = std::move(ks);
  j["recall_at"] = std::move(recalls);
  j["n_queries"] = report.n_queries;
  return j;
}

}  // namespace pixlab
