#include "pixlab/cli.hpp"

#include "pixlab/annotators.hpp"
#include "pixlab/checkpoint.hpp"
#include "pixlab/eval.hpp"
#include "pixlab/pipeline.hpp"
#include "pixlab/synthetic.hpp"
#include "pixlab/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace pixlab {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct DataArgs {
  std::string data;
  std::string records;
  std::string images;
};

void add_data_options(CLI::App* cmd, DataArgs& a, bool allow_records) {
  cmd->add_option("--data", a.data, "Synthetic dataset directory (from gen-data)");
  if (allow_records) {
    cmd->add_option("--records", a.records, "Annotation pipeline output; accepted records only");
    cmd->add_option("--images", a.images, "Directory image_refs resolve against (default: the records' directory)");
  }
}

std::vector<TrainingSample> load_training_samples(const DataArgs& a, double enlarge) {
  if (a.data.empty() == a.records.empty()) throw ValidationError("give exactly one of --data or --records");
  if (!a.data.empty()) return to_training_samples(read_synthetic_dataset(a.data), enlarge);
  const fs::path base = a.images.empty() ? fs::path(a.records).parent_path() : fs::path(a.images);
  return dataset_from_records(read_records(a.records), ppm_loader(base), enlarge);
}

std::vector<SyntheticSample> load_synthetic(const DataArgs& a) {
  if (a.data.empty()) throw ValidationError("--data is required");
  return read_synthetic_dataset(a.data);
}

void write_text_atomically(const fs::path& path, const std::string& content) {
  if (path.has_parent_path() && !fs::is_directory(path.parent_path())) {
    throw ValidationError("output directory " + path.parent_path().string() + " does not exist");
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

void check_writable_target(const std::string& path) {
  if (path.empty()) return;
  const fs::path p(path);
  if (p.has_parent_path() && !fs::is_directory(p.parent_path())) {
    throw ValidationError("output directory " + p.parent_path().string() + " does not exist");
  }
}

template <typename Enum>
CLI::Option* add_enum(CLI::App* cmd, const std::string& flag, Enum& value, const std::map<std::string, Enum>& names,
                      const std::string& help) {
  return cmd->add_option(flag, value, help)
      ->transform(CLI::CheckedTransformer(names, CLI::ignore_case))
      ->capture_default_str();
}

// --- gen-data ----------------------------------------------------------------

struct GenArgs {
  int n = 32;
  std::uint64_t seed = 0;
  int resolution = 32;
  std::string out;
  bool force = false;
};

void run_gen_data(const GenArgs& a, std::ostream& out) {
  if (a.n < 1) throw ValidationError("--n must be >= 1");
  const fs::path dir(a.out);
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir)) && !a.force) {
    throw ValidationError(dir.string() + " exists and is not empty (use --force to replace it)");
  }
  const auto samples = generate_synthetic_dataset(a.n, a.seed, a.resolution);
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  write_synthetic_dataset(tmp, samples);
  std::vector<ManifestEntry> manifest;
  for (const SyntheticSample& s : samples) manifest.push_back({"images/" + s.id + ".ppm", s.mask()});
  write_manifest(tmp / "manifest.jsonl", manifest);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  out << "wrote " << samples.size() << " samples to " << dir.string() << "\n";
}

// --- annotate ----------------------------------------------------------------

struct AnnotateArgs {
  std::string manifest;
  std::string out;
  int concurrency = 4;
  std::string annotator = "heuristic";
  std::string endpoint;
  int max_attempts = 4;
  int backoff_ms = 100;
};

void run_annotate(const AnnotateArgs& a, std::ostream& out) {
  if (a.concurrency < 1) throw ValidationError("--concurrency must be >= 1");
  check_writable_target(a.out);
  AnnotatorSuite suite;
  if (a.annotator == "heuristic") {
    suite = make_heuristic_suite();
  } else {
    HttpClientConfig cfg;
    cfg.base_url = a.endpoint;
    cfg.max_attempts = a.max_attempts;
    cfg.initial_backoff = std::chrono::milliseconds(a.backoff_ms);
    suite = make_http_suite(cfg);
  }
  const PipelineStats stats = run_pipeline(a.manifest, suite, a.out, a.concurrency);
  out << "accepted " << stats.accepted << " rejected " << stats.rejected << " failed " << stats.failed << " in "
      << stats.wall_time << " s\n";
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  DataArgs data;
  VisionEncoderConfig vision;
  TextEncoderConfig text;
  ProjectionMode region_projection = ProjectionMode::kSeparate;
  TrainingConfig train;
  long max_steps = 0;
  int eval_every = 0;
  bool stop_at_recall = false;
  int snapshot_every = 0;
  std::string out;
  std::string metrics;
};

void run_train(TrainArgs a, std::ostream& out) {
  if (a.out.empty()) throw ValidationError("--out is required");
  if (a.stop_at_recall && a.eval_every < 1) throw ValidationError("--stop-at-recall needs --eval-every >= 1");
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.jsonl" : a.metrics;
  check_writable_target(a.out);
  check_writable_target(metrics_path);
  a.train.validate();
  a.text.proj_dim = a.vision.proj_dim;
  ModelConfig mc = make_model_config(a.train, a.vision, a.text, a.train.seed);
  mc.region_projection = a.region_projection;
  mc.validate();

  fs::path snapshot_dir;
  if (a.snapshot_every > 0) {
    const char* cache = std::getenv("PIXLAB_CACHE");
    if (cache == nullptr || *cache == '\0') throw ValidationError("--snapshot-every needs PIXLAB_CACHE to be set");
    snapshot_dir = fs::path(cache) / "snapshots";
    fs::create_directories(snapshot_dir);
  }

  const std::vector<TrainingSample> samples = load_training_samples(a.data, a.train.enlarge_factor);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].input.pixels.height != mc.vision.input_resolution ||
        samples[i].input.pixels.width != mc.vision.input_resolution) {
      throw ValidationError("sample " + std::to_string(i) + " resolution does not match --resolution " +
                            std::to_string(mc.vision.input_resolution));
    }
  }

  PixModel model(mc);
  std::ostringstream metrics;
  auto on_step = [&](const StepMetrics& m, const PixModel& current) {
    write_metrics_line(metrics, m);
    if (!snapshot_dir.empty() && m.step % a.snapshot_every == 0) {
      save_checkpoint(snapshot_dir / ("step-" + std::to_string(m.step) + ".ckpt"), current);
    }
    if (a.eval_every > 0 && m.step % a.eval_every == 0) {
      const auto [m2t, t2m] = mask_text_retrieval(current, samples, {1});
      out << "step " << m.step << " l_total " << m.l_total << " M2T@1 " << m2t.recall_at.at(1) << " T2M@1 "
          << t2m.recall_at.at(1) << "\n";
      if (a.stop_at_recall && m2t.recall_at.at(1) == 1.0 && t2m.recall_at.at(1) == 1.0) return false;
    }
    return a.max_steps <= 0 || m.step < a.max_steps;
  };
  const TrainResult result = train(model, samples, a.train, on_step);
  save_checkpoint(a.out, model);
  write_text_atomically(metrics_path, metrics.str());
  out << "trained " << result.metrics.size() << " steps" << (result.stopped_early ? " (stopped early)" : "")
      << "; checkpoint " << a.out << " id " << checkpoint_id(a.out) << "\n";
}

// --- evaluation --------------------------------------------------------------

struct RetrievalArgs {
  std::string ckpt;
  DataArgs data;
  std::vector<int> ks{1, 5, 10};
  std::string mode = "mask";
  std::string out;
};

void emit_report(const ordered_json& report, const std::string& path, std::ostream& out) {
  const std::string text = report.dump(2) + "\n";
  if (!path.empty()) write_text_atomically(path, text);
  out << text;
}

void run_eval_retrieval(const RetrievalArgs& a, std::ostream& out) {
  check_writable_target(a.out);
  if (a.ckpt.empty()) throw ValidationError("--ckpt is required");
  const PixModel model = load_checkpoint(a.ckpt);
  const auto samples = load_training_samples(a.data, 1.5);
  ordered_json report;
  report["checkpoint"] = checkpoint_id(a.ckpt);
  report["reports"] = ordered_json::array();
  if (a.mode == "mask" || a.mode == "both") {
    const auto [m2t, t2m] = mask_text_retrieval(model, samples, a.ks);
    report["reports"].push_back(report_to_json(m2t));
    report["reports"].push_back(report_to_json(t2m));
  }
  if (a.mode == "image" || a.mode == "both") {
    const auto [i2t, t2i] = image_text_retrieval(model, samples, a.ks);
    report["reports"].push_back(report_to_json(i2t));
    report["reports"].push_back(report_to_json(t2i));
  }
  emit_report(report, a.out, out);
}

struct ClassifyArgs {
  std::string ckpt;
  DataArgs data;
  ClassifyOptions options;
  std::string label = "shape";
  std::string out;
};

void run_eval_classify(const ClassifyArgs& a, std::ostream& out) {
  check_writable_target(a.out);
  if (a.ckpt.empty()) throw ValidationError("--ckpt is required");
  const PixModel model = load_checkpoint(a.ckpt);
  const auto samples = load_synthetic(a.data);
  std::vector<std::string> classes;
  for (std::string_view color : kColorNames) {
    for (std::string_view shape : kShapeNames) {
      if (a.label == "shape") {
        if (color == kColorNames.front()) classes.emplace_back(shape);
      } else if (a.label == "color") {
        if (shape == kShapeNames.front()) classes.emplace_back(color);
      } else {
        classes.push_back(std::string(color) + " " + std::string(shape));
      }
    }
  }
  long hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto parsed = parse_long_caption(samples[i].long_caption);
    if (!parsed) throw ValidationError("sample " + std::to_string(i) + " has an unparseable caption");
    const std::string truth = a.label == "shape"   ? parsed->shape
                              : a.label == "color" ? parsed->color
                                                   : parsed->color + " " + parsed->shape;
    const auto top = zero_shot_classify(model, samples[i].image, samples[i].mask(), classes, a.options);
    hits += std::any_of(top.begin(), top.end(), [&](int c) { return classes[static_cast<std::size_t>(c)] == truth; });
  }
  ordered_json report;
  report["checkpoint"] = checkpoint_id(a.ckpt);
  report["protocol"] = a.options.protocol == ClassifyProtocol::kVisualPrompt ? "visual_prompt" : "crop_1_5x";
  report["label"] = a.label;
  report["k"] = a.options.k;
  report["n"] = samples.size();
  report["accuracy"] = samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
  emit_report(report, a.out, out);
}

struct RecArgs {
  std::string ckpt;
  DataArgs data;
  RecOptions options;
  std::string out;
};

void run_eval_rec(const RecArgs& a, std::ostream& out) {
  check_writable_target(a.out);
  if (a.ckpt.empty()) throw ValidationError("--ckpt is required");
  const PixModel model = load_checkpoint(a.ckpt);
  const RecReport rec = evaluate_rec(model, load_synthetic(a.data), a.options);
  ordered_json report;
  report["checkpoint"] = checkpoint_id(a.ckpt);
  report["candidates"] = a.options.candidates;
  report["iou_threshold"] = a.options.iou_threshold;
  report["n"] = rec.n;
  report["success_rate"] = rec.success_rate;
  report["exact_rate"] = rec.exact_rate;
  emit_report(report, a.out, out);
}

struct AttnArgs {
  std::string ckpt;
  DataArgs data;
  int index = 0;
  bool full_mask = false;
  std::string out;
};

void run_attnmap(const AttnArgs& a, std::ostream& out) {
  if (a.out.empty()) throw ValidationError("--out is required");
  check_writable_target(a.out);
  if (a.ckpt.empty()) throw ValidationError("--ckpt is required");
  const PixModel model = load_checkpoint(a.ckpt);
  const auto samples = load_synthetic(a.data);
  if (a.index < 0 || a.index >= static_cast<int>(samples.size())) {
    throw ValidationError("--index " + std::to_string(a.index) + " out of range for " +
                          std::to_string(samples.size()) + " samples");
  }
  const SyntheticSample& s = samples[static_cast<std::size_t>(a.index)];
  const Mask mask = a.full_mask ? all_ones_mask(s.image.height, s.image.width) : s.mask();
  export_attention_map(model, make_masked_image(s.image, mask), a.out);
  out << "wrote " << a.out << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mask-promptable vision-language toolkit", "pixlab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML file with one [section] per command; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen_cmd->add_option("--n", gen.n, "Number of samples")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--resolution", gen.resolution, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "Replace a non-empty output directory");

  AnnotateArgs ann;
  auto* ann_cmd = app.add_subcommand("annotate", "Run the three-stage annotation pipeline over a manifest");
  ann_cmd->add_option("--manifest", ann.manifest, "Line-delimited {image_ref, mask}")->required();
  ann_cmd->add_option("--out", ann.out, "Output records (JSONL); stats go to <out>.stats.json")->required();
  ann_cmd->add_option("--concurrency", ann.concurrency, "Parallel workers")->capture_default_str();
  ann_cmd->add_option("--annotator", ann.annotator, "heuristic or http")
      ->check(CLI::IsMember({"heuristic", "http"}))
      ->capture_default_str();
  ann_cmd->add_option("--endpoint", ann.endpoint, "Base URL of the HTTP annotator service");
  ann_cmd->add_option("--max-attempts", ann.max_attempts, "HTTP attempts per call")->capture_default_str();
  ann_cmd->add_option("--backoff-ms", ann.backoff_ms, "Initial HTTP retry delay")->capture_default_str();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a model");
  add_data_options(tr_cmd, tr.data, true);
  tr_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  tr_cmd->add_option("--metrics", tr.metrics, "Per-step metrics log (default <out>.metrics.jsonl)");
  tr_cmd->add_option("--seed", tr.train.seed, "Seed for initialization and batching")->capture_default_str();
  tr_cmd->add_option("--patch-size", tr.vision.patch_size)->capture_default_str();
  tr_cmd->add_option("--resolution", tr.vision.input_resolution)->capture_default_str();
  tr_cmd->add_option("--embed-dim", tr.vision.embed_dim)->capture_default_str();
  tr_cmd->add_option("--depth", tr.vision.depth)->capture_default_str();
  tr_cmd->add_option("--heads", tr.vision.heads)->capture_default_str();
  tr_cmd->add_option("--proj-dim", tr.vision.proj_dim, "Shared embedding width (vision and text)")
      ->capture_default_str();
  tr_cmd->add_option("--mlp-ratio", tr.vision.mlp_ratio)->capture_default_str();
  tr_cmd->add_option("--text-dim", tr.text.frozen_dim, "Frozen text feature width")->capture_default_str();
  tr_cmd->add_option("--adaptor-layers", tr.text.adaptor_layers)->capture_default_str();
  add_enum(tr_cmd, "--region-projection", tr.region_projection,
           {{"separate", ProjectionMode::kSeparate}, {"shared", ProjectionMode::kShared}},
           "Projection for pooled region features");
  tr_cmd->add_option("--alpha", tr.train.alpha, "Weight of the crop branch")->capture_default_str();
  tr_cmd->add_option("--beta", tr.train.beta, "Weight of the local-global branch")->capture_default_str();
  tr_cmd->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  tr_cmd->add_option("--epochs", tr.train.epochs)->capture_default_str();
  tr_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many steps (0: no limit)")->capture_default_str();
  tr_cmd->add_option("--warmup", tr.train.warmup_steps)->capture_default_str();
  tr_cmd->add_option("--lr-mask", tr.train.learning_rate_mask_embed, "Mask patch embedding learning rate")
      ->capture_default_str();
  tr_cmd->add_option("--lr-other", tr.train.learning_rate_other, "Learning rate of all other parameters")
      ->capture_default_str();
  tr_cmd->add_option("--weight-decay", tr.train.weight_decay)->capture_default_str();
  tr_cmd->add_option("--full-image-ratio", tr.train.full_image_ratio)->capture_default_str();
  tr_cmd->add_option("--short-prob", tr.train.short_text_probability)->capture_default_str();
  tr_cmd->add_option("--enlarge", tr.train.enlarge_factor, "Crop enlargement")->capture_default_str();
  tr_cmd->add_option("--overlap", tr.train.overlap_threshold, "Patch pooling threshold")->capture_default_str();
  tr_cmd->add_option("--log-scale-init", tr.train.log_scale_init)->capture_default_str();
  add_enum(tr_cmd, "--fc-target", tr.train.fc_target, {{"text", FcTarget::kText}, {"visual", FcTarget::kVisual}},
           "What the crop embedding is aligned with");
  add_enum(tr_cmd, "--fc-loss", tr.train.fc_loss,
           {{"contrastive", FcLoss::kContrastive}, {"positive", FcLoss::kPositiveOnly}}, "Crop branch loss form");
  tr_cmd->add_option("--eval-every", tr.eval_every, "Training-set retrieval check interval (0: off)")
      ->capture_default_str();
  tr_cmd->add_flag("--stop-at-recall", tr.stop_at_recall, "Stop once M2T and T2M recall@1 reach 1");
  tr_cmd->add_option("--snapshot-every", tr.snapshot_every, "Checkpoint into $PIXLAB_CACHE/snapshots")
      ->capture_default_str();

  RetrievalArgs ret;
  auto* ret_cmd = app.add_subcommand("eval-retrieval", "Mask-text and image-text retrieval recall@k");
  ret_cmd->add_option("--ckpt", ret.ckpt)->required();
  add_data_options(ret_cmd, ret.data, true);
  ret_cmd->add_option("--ks", ret.ks, "Cutoffs")->delimiter(',')->capture_default_str();
  ret_cmd->add_option("--mode", ret.mode, "mask, image or both")
      ->check(CLI::IsMember({"mask", "image", "both"}))
      ->capture_default_str();
  ret_cmd->add_option("--out", ret.out, "Report file (JSON)");

  ClassifyArgs cls;
  auto* cls_cmd = app.add_subcommand("eval-classify", "Zero-shot region classification");
  cls_cmd->add_option("--ckpt", cls.ckpt)->required();
  add_data_options(cls_cmd, cls.data, false);
  add_enum(cls_cmd, "--protocol", cls.options.protocol,
           {{"visual_prompt", ClassifyProtocol::kVisualPrompt}, {"crop_1_5x", ClassifyProtocol::kCrop}},
           "Mask as visual prompt, or crop around it");
  cls_cmd->add_option("--k", cls.options.k, "Top-k")->capture_default_str();
  cls_cmd->add_option("--enlarge", cls.options.enlarge, "Crop enlargement for crop_1_5x")->capture_default_str();
  cls_cmd->add_option("--template", cls.options.prompt_template, "Prompt template; {} is the class name")
      ->capture_default_str();
  cls_cmd->add_option("--label", cls.label, "shape, color or color_shape")
      ->check(CLI::IsMember({"shape", "color", "color_shape"}))
      ->capture_default_str();
  cls_cmd->add_option("--out", cls.out, "Report file (JSON)");

  RecArgs rec;
  auto* rec_cmd = app.add_subcommand("eval-rec", "Referring expression selection among candidate masks");
  rec_cmd->add_option("--ckpt", rec.ckpt)->required();
  add_data_options(rec_cmd, rec.data, false);
  rec_cmd->add_option("--candidates", rec.options.candidates, "Candidate masks per image")->capture_default_str();
  rec_cmd->add_option("--iou", rec.options.iou_threshold, "Success IoU threshold")->capture_default_str();
  rec_cmd->add_option("--out", rec.out, "Report file (JSON)");

  AttnArgs att;
  auto* att_cmd = app.add_subcommand("attnmap", "Export the class-token attention map of one sample");
  att_cmd->add_option("--ckpt", att.ckpt)->required();
  add_data_options(att_cmd, att.data, false);
  att_cmd->add_option("--index", att.index, "Sample index")->capture_default_str();
  att_cmd->add_flag("--full-mask", att.full_mask, "Use the all-ones mask instead of the sample mask");
  att_cmd->add_option("--out", att.out, "Output PGM")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (const CLI::App* sub : app.get_subcommands()) target = sub;
    out << target->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "pixlab: " << e.what() << "\n" << app.help();
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  out << "# resolved configuration\n[" << cmd->get_name() << "]\n" << cmd->config_to_str(true, false) << std::flush;
  try {
    const std::string& name = cmd->get_name();
    if (name == "gen-data") run_gen_data(gen, out);
    if (name == "annotate") run_annotate(ann, out);
    if (name == "train") run_train(tr, out);
    if (name == "eval-retrieval") run_eval_retrieval(ret, out);
    if (name == "eval-classify") run_eval_classify(cls, out);
    if (name == "eval-rec") run_eval_rec(rec, out);
    if (name == "attnmap") run_attnmap(att, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "pixlab " << cmd->get_name() << ": error: " << msg << "\n";
    return 1;
  }
  return 0;
}

}  // namespace pixlab
