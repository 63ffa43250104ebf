// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.

#include "pixlab/checkpoint.hpp"
#include "pixlab/eval.hpp"
#include "pixlab/pipeline.hpp"
#include "pixlab/synthetic.hpp"
#include "pixlab/training.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

using namespace pixlab;
using pixlab::testing::random_image;
using pixlab::testing::random_mask;
using pixlab::testing::random_matrix;
using pixlab::testing::read_file;
using pixlab::testing::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// 1 -------------------------------------------------------------------------

Outcome zero_init_neutrality() {
  const VisionEncoder enc(VisionEncoderConfig{}, 2024);
  std::mt19937_64 rng(1);
  const int res = enc.config().input_resolution;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Image img = random_image(rng, res, res);
    const VisionOutput with = encode_vision(enc, make_masked_image(img, random_mask(rng, res, res, 0.05 + 0.009 * i)));
    const VisionOutput without = encode_vision(enc, make_masked_image(img, Mask(res, res)));
    worst = std::max(worst, (with.global - without.global).cwiseAbs().maxCoeff());
    worst = std::max(worst, (with.dense.features - without.dense.features).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6, "max abs diff " + fmt("%.3g", worst) + " over 100 pairs"};
}

// 2 -------------------------------------------------------------------------

Outcome gradient_correctness() {
  const ModelConfig mc = pixlab::testing::tiny_model_config(5);
  PixModel model(mc);
  std::mt19937_64 rng(5);
  for (Parameter* p : model.parameters()) {
    if (p->group == ParamGroup::kMaskEmbed) p->value = random_matrix(rng, p->value.rows(), p->value.cols(), 0.3);
  }
  const std::size_t n_params = pixlab::testing::parameter_count(model);

  std::vector<BatchItem> batch;
  for (int i = 0; i < 3; ++i) {
    const Image img = random_image(rng, 8, 8);
    const Mask m = pixlab::testing::rect_mask(8, 8, i, i, 3 + i, 4 + i % 2);
    const TrainingSample s = make_training_sample(img, m, "long " + std::to_string(i), "short " + std::to_string(i),
                                                  "global " + std::to_string(i), 1.5);
    batch.push_back({s.input, s.crop, s.long_caption, CaptionKind::kLong, false});
  }
  batch[2].full.mask = all_ones_mask(8, 8);
  batch[2].crop = batch[2].full;
  batch[2].caption = "global 2";
  batch[2].swapped = true;

  TrainingConfig cfg;
  cfg.batch_size = 3;
  cfg.alpha = 0.25;
  cfg.beta = 0.25;
  GradientMap grads;
  forward_three_branch(batch, model, cfg, &grads);
  double diff = 0.0;
  double ref = 0.0;
  const double h = 1e-6;
  for (Parameter* p : model.parameters()) {
    const auto it = grads.find(p);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double up = forward_three_branch(batch, model, cfg).l_total;
      p->value.data()[i] = orig - h;
      const double down = forward_three_branch(batch, model, cfg).l_total;
      p->value.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = it == grads.end() ? 0.0 : it->second.data()[i];
      diff += (analytic - numeric) * (analytic - numeric);
      ref += numeric * numeric;
    }
  }
  const double rel = std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
  return {rel <= 1e-4 && n_params <= 1000,
          std::to_string(n_params) + " parameters, relative error " + fmt("%.3g", rel)};
}

// 3 -------------------------------------------------------------------------

Outcome closed_form_loss() {
  const Matrix e = Matrix::Identity(2, 2);
  const double two = contrastive_loss(e, e, ContrastiveConfig{0.0, std::log(100.0)});
  const double expected = std::log1p(std::exp(-1.0));
  std::mt19937_64 rng(3);
  const Matrix v = random_matrix(rng, 1, 8);
  const double one = contrastive_loss(v, v, ContrastiveConfig{});
  return {std::abs(two - 0.31326) <= 1e-5 && std::abs(two - expected) <= 1e-12 && one == 0.0,
          "B=2 " + fmt("%.12f", two) + ", B=1 " + fmt("%g", one)};
}

// 4 -------------------------------------------------------------------------

Outcome pooling_oracle() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int grid = 2 + static_cast<int>(rng() % 5);
    const int patch = 1 + static_cast<int>(rng() % 4);
    const int res = grid * patch;
    const int dim = 2 + static_cast<int>(rng() % 6);
    const DenseFeatureMap dense{grid, random_matrix(rng, grid * grid, dim)};
    const Mask mask = random_mask(rng, res, res, 0.05 + 0.9 * unit(rng));
    const double thr = std::min(unit(rng), 0.999);
    const Matrix proj = random_matrix(rng, dim, 3);

    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(dim);
    int selected = 0;
    int best = -1;
    int best_count = 0;
    for (int k = 0; k < grid * grid; ++k) {
      int count = 0;
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) count += mask.on((k / grid) * patch + y, (k % grid) * patch + x) ? 1 : 0;
      }
      if (static_cast<double>(count) / (patch * patch) > thr) {
        sum += dense.features.row(k);
        ++selected;
      }
      if (count > best_count) {
        best_count = count;
        best = k;
      }
    }
    const Eigen::RowVectorXd pooled = selected > 0 ? Eigen::RowVectorXd(sum / selected) : dense.features.row(best);
    Embedding expected = pooled * proj;
    expected.normalize();
    const Embedding got = pool_region_features(dense, mask, PoolingConfig{thr, ProjectionMode::kSeparate}, proj);
    worst = std::max(worst, (got - expected).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6, "max abs diff " + fmt("%.3g", worst) + " over 1000 cases"};
}

// 5 -------------------------------------------------------------------------

Outcome retrieval_oracle() {
  std::mt19937_64 rng(5);
  const int n = 256;
  const Matrix cand = random_matrix(rng, n, 32);
  const Matrix queries = random_matrix(rng, n, 32);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::string> gt;
  for (int i = 0; i < n; ++i) gt.push_back(ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
  const std::vector<int> ks{1, 5, 10};
  const RetrievalReport rep = recall_at_k(queries, RetrievalIndex::build(cand, ids), gt, ks, Direction::kM2T);

  bool exact = true;
  bool monotone = true;
  double prev = 0.0;
  std::string detail;
  for (int k : ks) {
    int hits = 0;
    for (int q = 0; q < n; ++q) {
      std::vector<std::pair<double, int>> scored;
      for (int c = 0; c < n; ++c) {
        scored.emplace_back(-queries.row(q).normalized().dot(cand.row(c).normalized()), c);
      }
      std::sort(scored.begin(), scored.end());
      for (int j = 0; j < k; ++j) hits += scored[static_cast<std::size_t>(j)].second == perm[static_cast<std::size_t>(q)];
    }
    const double oracle = static_cast<double>(hits) / n;
    exact = exact && rep.recall_at.at(k) == oracle;
    monotone = monotone && rep.recall_at.at(k) >= prev;
    prev = rep.recall_at.at(k);
    detail += "R@" + std::to_string(k) + " " + fmt("%.4f", oracle) + " ";
  }
  return {exact && monotone, detail + (exact ? "(exact)" : "(mismatch)")};
}

// 6 and 9 ------------------------------------------------------------------

struct ToyRun {
  std::optional<long> steps_to_recall;
  long steps = 0;
  double seconds = 0.0;
  bool hash_invariant = false;
};

TrainingConfig toy_config(std::uint64_t seed, bool ablate) {
  TrainingConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 500;
  cfg.warmup_steps = 20;
  cfg.learning_rate_mask_embed = 1e-3;
  cfg.learning_rate_other = 1e-3;
  cfg.seed = seed;
  if (ablate) {
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
  }
  return cfg;
}

ToyRun toy_run(const std::vector<TrainingSample>& data, std::uint64_t seed, bool ablate) {
  const auto start = std::chrono::steady_clock::now();
  const TrainingConfig cfg = toy_config(seed, ablate);
  PixModel model(make_model_config(cfg, VisionEncoderConfig{}, TextEncoderConfig{}, seed));
  const auto hash = model.text().frozen().parameter_hash();
  ToyRun run;
  const TrainResult r = train(model, data, cfg, [&](const StepMetrics& m, const PixModel& current) {
    if (m.step % 10 == 0) {
      const auto [m2t, t2m] = mask_text_retrieval(current, data, {1});
      if (m2t.recall_at.at(1) == 1.0 && t2m.recall_at.at(1) == 1.0) {
        run.steps_to_recall = m.step;
        return false;
      }
    }
    return m.step < 500;
  });
  run.steps = static_cast<long>(r.metrics.size());
  run.hash_invariant = model.text().frozen().parameter_hash() == hash;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

struct ToyStudy {
  std::vector<ToyRun> full;
  std::vector<ToyRun> ablated;
};

const ToyStudy& toy_study() {
  static const ToyStudy study = [] {
    const auto data = to_training_samples(generate_synthetic_dataset(32, 7, VisionEncoderConfig{}.input_resolution), 1.5);
    ToyStudy s;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      s.full.push_back(toy_run(data, seed, false));
      s.ablated.push_back(toy_run(data, seed, true));
    }
    return s;
  }();
  return study;
}

std::string steps_text(const ToyRun& r) {
  return r.steps_to_recall ? std::to_string(*r.steps_to_recall) : std::string(">500");
}

Outcome toy_overfit() {
  const ToyStudy& s = toy_study();
  std::ostringstream table;
  table << "    seed | full objective | alpha=beta=0 | ablation no faster\n";
  int reached = 0;
  int no_faster = 0;
  for (std::size_t i = 0; i < s.full.size(); ++i) {
    const ToyRun& f = s.full[i];
    const ToyRun& a = s.ablated[i];
    const long fs = f.steps_to_recall.value_or(501);
    const long as = a.steps_to_recall.value_or(501);
    reached += f.steps_to_recall.has_value();
    no_faster += as >= fs;
    char row[160];
    std::snprintf(row, sizeof(row), "    %-4zu | %5s (%3.0f s)    | %5s (%3.0f s)  | %s\n", i + 1, steps_text(f).c_str(),
                  f.seconds, steps_text(a).c_str(), a.seconds, as >= fs ? "yes" : "no");
    table << row;
  }
  table << "    ablation no faster on " << no_faster << "/5 seeds (reported, not asserted)";
  std::cout << "steps to training-set M2T and T2M recall@1 = 1.0:\n" << table.str() << "\n";
  const bool primary = s.full.front().steps_to_recall.has_value();
  return {primary, "seed 1 reached recall@1 = 1.0 at step " + steps_text(s.full.front()) + "; " +
                       std::to_string(reached) + "/5 full-objective seeds within 500 steps"};
}

// 7 -------------------------------------------------------------------------

Outcome batch_swap_statistics() {
  const auto data = to_training_samples(generate_synthetic_dataset(100, 3, 16), 1.5);
  TrainingConfig cfg;
  cfg.batch_size = 100;
  cfg.full_image_ratio = 0.1;
  std::mt19937_64 rng(7);
  long swaps = 0;
  for (int round = 0; round < 100; ++round) {
    for (const BatchItem& item : assemble_batch(data, rng, cfg)) swaps += item.swapped;
  }
  return {swaps >= 910 && swaps <= 1090, std::to_string(swaps) + " swaps in 10000 draws"};
}

// 8 -------------------------------------------------------------------------

Outcome pipeline_conservation() {
  TempDir dir("accept-pipe");
  std::vector<ManifestEntry> entries;
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    entries.push_back({"img" + std::to_string(i), random_mask(rng, 16, 16, 0.2)});
  }
  write_manifest(dir.path / "manifest.jsonl", entries);
  ImageLoader loader = [](const std::string& ref) {
    std::mt19937_64 r(std::hash<std::string>{}(ref));
    return random_image(r, 16, 16);
  };
  // Object captions encode the box, so the gate can be driven by geometry:
  // every third box fails validation and every seventh captioning call errors.
  AnnotatorSuite suite;
  suite.object_captioner = std::make_shared<MockObjectCaptioner>("mock-obj", [](const Image& crop, const Mask& m) {
    const auto on = m.count();
    if (on % 7 == 0) throw AnnotatorError("captioner unavailable");
    return "object " + std::to_string(crop.height) + "x" + std::to_string(crop.width) + " n" + std::to_string(on);
  });
  suite.validator = std::make_shared<MockCaptionValidator>("mock-val", [](const std::string& c, const Image&) {
    const auto n = std::stoul(c.substr(c.rfind('n') + 1));
    return n % 3 == 0 ? Verdict::kInconsistent : Verdict::kConsistent;
  });
  suite.context_captioner = std::make_shared<MockContextCaptioner>("mock-ctx", [](const Image&, const BBox& b) {
    return "near row " + std::to_string(b.row_min);
  });
  suite.merger = std::make_shared<MockCaptionMerger>("mock-merge");

  const auto one = dir.path / "one.jsonl";
  const auto four = dir.path / "four.jsonl";
  const PipelineStats s1 = run_pipeline(dir.path / "manifest.jsonl", suite, one, 1, loader);
  const PipelineStats s4 = run_pipeline(dir.path / "manifest.jsonl", suite, four, 4, loader);
  const bool conserved = s1.accepted + s1.rejected + s1.failed == 100 && s4.accepted + s4.rejected + s4.failed == 100;

  auto strip = [](const std::filesystem::path& p) {
    std::string out;
    for (const auto& r : read_records(p)) out += record_to_json(r, false).dump() + "\n";
    return out;
  };
  const bool identical = strip(one) == strip(four);

  const auto records = read_records(one);
  std::set<std::vector<std::int64_t>> rejected;
  for (const auto& r : records) {
    if (r.status != RecordStatus::kAccepted) rejected.insert(encode_rle(r.mask));
  }
  const auto data = dataset_from_records(records, loader, 1.5);
  bool gate = static_cast<long>(data.size()) == s1.accepted;
  for (const auto& s : data) gate = gate && rejected.count(encode_rle(s.input.mask)) == 0;

  return {conserved && identical && gate && s1.rejected > 0 && s1.failed > 0,
          "accepted " + std::to_string(s1.accepted) + " rejected " + std::to_string(s1.rejected) + " failed " +
              std::to_string(s1.failed) + "; c1 vs c4 " + (identical ? "identical" : "differ") + "; gate " +
              (gate ? "holds" : "leaks")};
}

// 9 -------------------------------------------------------------------------

Outcome differential_learning_rates() {
  const auto data = to_training_samples(generate_synthetic_dataset(8, 9, 32), 1.5);
  TrainingConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.warmup_steps = 0;
  cfg.learning_rate_mask_embed = 1e-3;
  cfg.learning_rate_other = 0.0;
  PixModel model(make_model_config(cfg, VisionEncoderConfig{}, TextEncoderConfig{}, 9));
  const PixModel before = model;
  const TrainResult r = train(model, data, cfg);
  const auto now = model.parameters();
  const auto then = before.parameters();
  int mask_changed = 0;
  int other_changed = 0;
  for (std::size_t i = 0; i < now.size(); ++i) {
    if (now[i]->value == then[i]->value) continue;
    (now[i]->group == ParamGroup::kMaskEmbed ? mask_changed : other_changed)++;
  }
  const ToyStudy& s = toy_study();
  bool hash_ok = true;
  for (const ToyRun& t : s.full) hash_ok = hash_ok && t.hash_invariant;
  for (const ToyRun& t : s.ablated) hash_ok = hash_ok && t.hash_invariant;
  return {r.metrics.size() == 1 && mask_changed == 2 && other_changed == 0 && hash_ok,
          std::to_string(mask_changed) + " mask-embedding tensors changed, " + std::to_string(other_changed) +
              " others; frozen hash " + (hash_ok ? "invariant over 10 toy runs" : "changed")};
}

// 10 ------------------------------------------------------------------------

Outcome determinism() {
  TempDir dir("accept-det");
  struct Artifacts {
    std::string dataset;
    std::string metrics;
    std::string attention;
  };
  auto produce = [&](const std::string& tag) {
    Artifacts a;
    const auto ddir = dir.path / ("data-" + tag);
    const auto samples = generate_synthetic_dataset(32, 10, 32);
    write_synthetic_dataset(ddir, samples);
    a.dataset = read_file(ddir / "samples.jsonl");
    for (const auto& s : samples) a.dataset += read_file(ddir / "images" / (s.id + ".ppm"));

    const auto data = to_training_samples(samples, 1.5);
    TrainingConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.warmup_steps = 2;
    cfg.learning_rate_mask_embed = 1e-3;
    cfg.learning_rate_other = 1e-3;
    cfg.seed = 10;
    PixModel model(make_model_config(cfg, VisionEncoderConfig{}, TextEncoderConfig{}, 10));
    std::ostringstream metrics;
    for (const StepMetrics& m : train(model, data, cfg).metrics) write_metrics_line(metrics, m);
    a.metrics = metrics.str();
    const auto pgm = dir.path / ("attn-" + tag + ".pgm");
    export_attention_map(model, data[3].input, pgm);
    a.attention = read_file(pgm);
    return a;
  };
  const Artifacts x = produce("a");
  const Artifacts y = produce("b");
  const bool ds = x.dataset == y.dataset;
  const bool mt = x.metrics == y.metrics && !x.metrics.empty();
  const bool at = x.attention == y.attention && !x.attention.empty();
  return {ds && mt && at, std::string("dataset ") + (ds ? "identical" : "differs") + ", metrics " +
                              (mt ? "identical" : "differ") + ", attention map " + (at ? "identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"zero-init neutrality", zero_init_neutrality},
      {"gradient correctness", gradient_correctness},
      {"closed-form loss", closed_form_loss},
      {"pooling oracle", pooling_oracle},
      {"retrieval oracle", retrieval_oracle},
      {"toy overfit", toy_overfit},
      {"batch-swap statistics", batch_swap_statistics},
      {"pipeline conservation and gate", pipeline_conservation},
      {"differential learning rates", differential_learning_rates},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
