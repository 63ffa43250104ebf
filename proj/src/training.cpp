#include "pixlab/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pixlab {

using autodiff::Tape;
using autodiff::Var;

void TrainingConfig::validate() const {
  weights().validate();
  auto prob = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
  if (!prob(full_image_ratio) || !prob(short_text_probability)) {
    throw ValidationError("probabilities must lie in [0, 1]");
  }
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 0 || warmup_steps < 0) throw ValidationError("epochs and warmup_steps must be >= 0");
  if (!(learning_rate_mask_embed >= 0.0) || !(learning_rate_other >= 0.0) || !(weight_decay >= 0.0)) {
    throw ValidationError("learning rates and weight decay must be non-negative");
  }
  if (!(enlarge_factor >= 1.0)) throw ValidationError("enlarge_factor must be >= 1");
  PoolingConfig{overlap_threshold, ProjectionMode::kSeparate}.validate();
  if (!std::isfinite(log_scale_init)) throw ValidationError("log_scale_init must be finite");
}

ModelConfig make_model_config(const TrainingConfig& cfg, const VisionEncoderConfig& vision,
                              const TextEncoderConfig& text, std::uint64_t seed) {
  ModelConfig mc;
  mc.vision = vision;
  mc.text = text;
  mc.overlap_threshold = cfg.overlap_threshold;
  mc.log_scale_init = cfg.log_scale_init;
  mc.seed = seed;
  return mc;
}

TrainingSample make_training_sample(Image image, Mask mask, std::string long_caption, std::string short_caption,
                                    std::string global_caption, double enlarge) {
  if (long_caption.empty() || global_caption.empty()) {
    throw ValidationError("training sample needs a long caption and a global caption");
  }
  TrainingSample s;
  s.input = make_masked_image(std::move(image), std::move(mask));
  Crop crop = derive_crop(s.input.pixels, s.input.mask, enlarge, s.input.pixels.height, s.input.pixels.width);
  s.crop = make_masked_image(std::move(crop.image), std::move(crop.mask));
  s.long_caption = std::move(long_caption);
  s.short_caption = std::move(short_caption);
  s.global_caption = std::move(global_caption);
  return s;
}

namespace {

// Uniform draw in [0, 1) from the top 53 bits of the engine output.
double draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

std::vector<BatchItem> assemble_batch(std::span<const TrainingSample> samples, std::mt19937_64& rng,
                                      const TrainingConfig& cfg) {
  if (samples.size() != static_cast<std::size_t>(cfg.batch_size)) {
    throw ValidationError("assemble_batch: got " + std::to_string(samples.size()) + " samples for batch size " +
                          std::to_string(cfg.batch_size));
  }
  std::vector<BatchItem> batch;
  batch.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const TrainingSample& s = samples[i];
    if (s.long_caption.empty() || s.global_caption.empty()) {
      throw ValidationError("assemble_batch: sample " + std::to_string(i) + " is missing a caption");
    }
    // Two draws per sample regardless of outcome keep the stream aligned.
    const double swap_draw = draw(rng);
    const double text_draw = draw(rng);
    BatchItem item;
    if (swap_draw < cfg.full_image_ratio) {
      Mask ones = all_ones_mask(s.input.pixels.height, s.input.pixels.width);
      item.full = MaskedImage{s.input.pixels, ones};
      item.crop = MaskedImage{s.input.pixels, std::move(ones)};
      item.caption = s.global_caption;
      item.caption_kind = CaptionKind::kGlobal;
      item.swapped = true;
    } else {
      item.full = s.input;
      item.crop = s.crop;
      const bool use_short = !s.short_caption.empty() && text_draw < cfg.short_text_probability;
      item.caption = use_short ? s.short_caption : s.long_caption;
      item.caption_kind = use_short ? CaptionKind::kShort : CaptionKind::kLong;
    }
    batch.push_back(std::move(item));
  }
  return batch;
}

BranchLosses forward_three_branch(std::span<const BatchItem> batch, const PixModel& model, const TrainingConfig& cfg,
                                  GradientMap* grads) {
  if (batch.empty()) throw ValidationError("forward_three_branch: empty batch");
  std::vector<MaskedImage> fulls;
  std::vector<MaskedImage> crops;
  std::vector<MaskedImage> wholes;
  std::vector<Mask> masks;
  std::vector<std::string> captions;
  for (const BatchItem& item : batch) {
    fulls.push_back(item.full);
    crops.push_back(item.crop);
    wholes.push_back(MaskedImage{item.full.pixels, all_ones_mask(item.full.pixels.height, item.full.pixels.width)});
    masks.push_back(item.full.mask);
    captions.push_back(item.caption);
  }

  Tape tape(grads != nullptr);
  // Branches with zero weight contribute no gradient; evaluate them on a
  // non-recording tape so they are still logged.
  Tape side(false);

  Var log_scale = tape.parameter(model.log_scale());
  auto b1 = model.vision().forward(tape, fulls);
  Var text = model.text().forward(tape, captions);
  Var l_cl = autodiff::contrastive_loss(b1.global, text, log_scale);

  Tape& fc_tape = cfg.alpha != 0.0 ? tape : side;
  Var fc_text = &fc_tape == &tape ? text : side.constant(text.value());
  Var fc_visual = &fc_tape == &tape ? b1.global : side.constant(b1.global.value());
  Var fc_scale = &fc_tape == &tape ? log_scale : side.constant(log_scale.value());
  auto b2 = model.vision().forward(fc_tape, crops);
  Var fc_target = cfg.fc_target == FcTarget::kText ? fc_text : fc_visual;
  Var l_fc = cfg.fc_loss == FcLoss::kContrastive ? autodiff::contrastive_loss(b2.global, fc_target, fc_scale)
                                                 : autodiff::positive_cosine_loss(b2.global, fc_target);

  Tape& lg_tape = cfg.beta != 0.0 ? tape : side;
  Var lg_visual = &lg_tape == &tape ? b1.global : side.constant(b1.global.value());
  Var lg_scale = &lg_tape == &tape ? log_scale : side.constant(log_scale.value());
  auto b3 = model.vision().forward(lg_tape, wholes);
  Var region = model.region_embeddings(lg_tape, b3.dense, masks);
  Var l_lg = autodiff::contrastive_loss(region, lg_visual, lg_scale);

  BranchLosses out;
  out.l_cl = l_cl.value()(0, 0);
  out.l_fc = l_fc.value()(0, 0);
  out.l_lg = l_lg.value()(0, 0);
  out.l_total = composite_loss(out.l_cl, out.l_fc, out.l_lg, cfg.weights());

  if (grads != nullptr) {
    std::vector<Var> terms{l_cl};
    std::vector<double> coeffs{1.0};
    if (cfg.alpha != 0.0) {
      terms.push_back(l_fc);
      coeffs.push_back(cfg.alpha);
    }
    if (cfg.beta != 0.0) {
      terms.push_back(l_lg);
      coeffs.push_back(cfg.beta);
    }
    Var total = autodiff::weighted_sum(terms, coeffs);
    tape.backward(total);
    tape.accumulate(*grads);
  }
  return out;
}

TrainResult train(PixModel& model, std::span<const TrainingSample> dataset, const TrainingConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw ValidationError("train: dataset is empty");
  if (dataset.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw ValidationError("train: dataset has " + std::to_string(dataset.size()) + " samples, fewer than batch size " +
                          std::to_string(cfg.batch_size));
  }
  if (model.config().overlap_threshold != cfg.overlap_threshold) {
    throw ValidationError("train: overlap_threshold disagrees with the model configuration");
  }

  std::mt19937_64 rng(cfg.seed);
  AdamW optimizer(AdamWConfig{0.9, 0.98, 1e-6, cfg.weight_decay});
  const std::vector<Parameter*> params = model.parameters();
  const std::size_t per_epoch = dataset.size() / static_cast<std::size_t>(cfg.batch_size);

  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  std::vector<TrainingSample> chunk;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < per_epoch; ++k) {
      ++step;
      chunk.clear();
      for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.batch_size); ++i) {
        chunk.push_back(dataset[order[k * cfg.batch_size + i]]);
      }
      const std::vector<BatchItem> batch = assemble_batch(chunk, rng, cfg);

      GradientMap grads;
      BranchLosses losses;
      try {
        losses = forward_three_branch(batch, model, cfg, &grads);
      } catch (const ValidationError& e) {
        throw TrainingError("step " + std::to_string(step) + ": " + e.what(), step);
      }
      if (!std::isfinite(losses.l_total)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step), step);
      }
      StepMetrics m;
      m.step = step;
      m.l_cl = losses.l_cl;
      m.l_fc = losses.l_fc;
      m.l_lg = losses.l_lg;
      m.l_total = losses.l_total;
      m.lr_mask = warmup_rate(cfg.learning_rate_mask_embed, step, cfg.warmup_steps);
      m.lr_other = warmup_rate(cfg.learning_rate_other, step, cfg.warmup_steps);
      optimizer.step(params, grads, m.lr_mask, m.lr_other);
      model.clamp_log_scale();
      m.log_scale = model.log_scale().value(0, 0);
      result.metrics.push_back(m);
      if (on_step && !on_step(m, model)) {
        result.stopped_early = true;
        return result;
      }
    }
  }
  return result;
}

void write_metrics_line(std::ostream& out, const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["l_cl"] = m.l_cl;
  j["l_fc"] = m.l_fc;
  j["l_lg"] = m.l_lg;
  j["l_total"] = m.l_total;
  j["log_scale"] = m.log_scale;
  j["lr_mask"] = m.lr_mask;
  j["lr_other"] = m.lr_other;
  out << j.dump() << '\n';
}

}  // namespace pixlab
