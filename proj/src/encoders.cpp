#include "pixlab/encoders.hpp"

#include <cmath>
#include <cctype>
#include <random>
#include <sstream>

namespace pixlab {

using autodiff::Tape;
using autodiff::Var;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [lo, hi) from the top 53 bits; independent of the standard
// library's distribution implementations.
double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

Matrix uniform_matrix(std::mt19937_64& rng, int rows, int cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
  return m;
}

Matrix normal_matrix(std::mt19937_64& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Parameter make_param(std::string name, Matrix value, bool decay = false,
                     ParamGroup group = ParamGroup::kOther) {
  return Parameter{std::move(name), std::move(value), group, decay};
}

Linear make_linear(std::mt19937_64& rng, const std::string& name, int in, int out, bool bias = true) {
  Linear l;
  l.weight = make_param(name + ".weight", uniform_matrix(rng, in, out, 1.0 / std::sqrt(in)), true);
  l.has_bias = bias;
  if (bias) l.bias = make_param(name + ".bias", Matrix::Zero(1, out));
  return l;
}

void push_linear(std::vector<Parameter*>& out, Linear& l) {
  out.push_back(&l.weight);
  if (l.has_bias) out.push_back(&l.bias);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Var Linear::apply(Tape& tape, Var x) const {
  Var y = autodiff::matmul(x, tape.parameter(weight));
  return has_bias ? autodiff::add_row(y, tape.parameter(bias)) : y;
}

void VisionEncoderConfig::validate() const {
  if (patch_size <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0 || proj_dim <= 0 ||
      input_resolution <= 0 || mlp_ratio <= 0) {
    throw ValidationError("vision config: all sizes must be positive");
  }
  if (embed_dim % heads != 0) throw ValidationError("vision config: embed_dim must be divisible by heads");
  if (input_resolution % patch_size != 0) {
    throw ValidationError("vision config: input_resolution must be divisible by patch_size");
  }
}

VisionEncoder::VisionEncoder(const VisionEncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(splitmix64(seed));
  const int p = config_.patch_size;
  const int d = config_.embed_dim;
  const double width_scale = 1.0 / std::sqrt(d);

  patch_image_ = make_linear(rng, "vision.patch_image", 3 * p * p, d);
  patch_mask_.weight = make_param("vision.patch_mask.weight", Matrix::Zero(p * p, d), false, ParamGroup::kMaskEmbed);
  patch_mask_.bias = make_param("vision.patch_mask.bias", Matrix::Zero(1, d), false, ParamGroup::kMaskEmbed);
  class_token_ = make_param("vision.class_token", normal_matrix(rng, 1, d, width_scale));
  positional_ = make_param("vision.positional", normal_matrix(rng, config_.num_patches() + 1, d, width_scale));

  for (int i = 0; i < config_.depth; ++i) {
    const std::string prefix = "vision.blocks." + std::to_string(i);
    Block b;
    b.ln1_gamma = make_param(prefix + ".ln1.gamma", Matrix::Ones(1, d));
    b.ln1_beta = make_param(prefix + ".ln1.beta", Matrix::Zero(1, d));
    b.qkv = make_linear(rng, prefix + ".qkv", d, 3 * d);
    b.attn_out = make_linear(rng, prefix + ".attn_out", d, d);
    b.ln2_gamma = make_param(prefix + ".ln2.gamma", Matrix::Ones(1, d));
    b.ln2_beta = make_param(prefix + ".ln2.beta", Matrix::Zero(1, d));
    b.fc1 = make_linear(rng, prefix + ".fc1", d, config_.mlp_ratio * d);
    b.fc2 = make_linear(rng, prefix + ".fc2", config_.mlp_ratio * d, d);
    blocks_.push_back(std::move(b));
  }
  ln_post_gamma_ = make_param("vision.ln_post.gamma", Matrix::Ones(1, d));
  ln_post_beta_ = make_param("vision.ln_post.beta", Matrix::Zero(1, d));
  proj_ = make_param("vision.proj", normal_matrix(rng, d, config_.proj_dim, width_scale), true);
}

std::vector<Parameter*> VisionEncoder::parameters() {
  std::vector<Parameter*> out;
  push_linear(out, patch_image_);
  push_linear(out, patch_mask_);
  out.push_back(&class_token_);
  out.push_back(&positional_);
  for (Block& b : blocks_) {
    out.push_back(&b.ln1_gamma);
    out.push_back(&b.ln1_beta);
    push_linear(out, b.qkv);
    push_linear(out, b.attn_out);
    out.push_back(&b.ln2_gamma);
    out.push_back(&b.ln2_beta);
    push_linear(out, b.fc1);
    push_linear(out, b.fc2);
  }
  out.push_back(&ln_post_gamma_);
  out.push_back(&ln_post_beta_);
  out.push_back(&proj_);
  return out;
}

std::vector<const Parameter*> VisionEncoder::parameters() const {
  auto mut = const_cast<VisionEncoder*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

Matrix image_patches(const Image& image, int patch_size) {
  if (image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ShapeError("image dimensions are not multiples of the patch size");
  }
  const int gh = image.height / patch_size;
  const int gw = image.width / patch_size;
  const int c = image.channels;
  Matrix out(gh * gw, patch_size * patch_size * c);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      int col = 0;
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          for (int ch = 0; ch < c; ++ch) out(row, col++) = image.at(gy * patch_size + y, gx * patch_size + x, ch);
        }
      }
    }
  }
  return out;
}

Matrix mask_patches(const Mask& mask, int patch_size) {
  if (mask.height % patch_size != 0 || mask.width % patch_size != 0) {
    throw ShapeError("mask dimensions are not multiples of the patch size");
  }
  const int gh = mask.height / patch_size;
  const int gw = mask.width / patch_size;
  Matrix out(gh * gw, patch_size * patch_size);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      int col = 0;
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) out(gy * gw + gx, col++) = mask.at(gy * patch_size + y, gx * patch_size + x);
      }
    }
  }
  return out;
}

void VisionEncoder::check_input(const MaskedImage& input) const {
  const int r = config_.input_resolution;
  if (input.pixels.height != r || input.pixels.width != r || input.pixels.channels != 3) {
    throw ShapeError("image is " + std::to_string(input.pixels.height) + "x" + std::to_string(input.pixels.width) +
                     "x" + std::to_string(input.pixels.channels) + ", encoder expects " + std::to_string(r) + "x" +
                     std::to_string(r) + "x3");
  }
  if (input.mask.height != r || input.mask.width != r) {
    throw ShapeError("mask is " + std::to_string(input.mask.height) + "x" + std::to_string(input.mask.width) +
                     ", encoder expects " + std::to_string(r) + "x" + std::to_string(r));
  }
}

Var VisionEncoder::embed_patches(Tape& tape, std::span<const MaskedImage> batch) const {
  if (batch.empty()) throw ValidationError("empty batch");
  const int p = config_.patch_size;
  const int n = config_.num_patches();
  Matrix pix(static_cast<Eigen::Index>(batch.size()) * n, 3 * p * p);
  Matrix msk(static_cast<Eigen::Index>(batch.size()) * n, p * p);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    try {
      check_input(batch[b]);
    } catch (const ShapeError& e) {
      throw ShapeError("sample " + std::to_string(b) + ": " + e.what());
    }
    pix.middleRows(static_cast<Eigen::Index>(b) * n, n) = image_patches(batch[b].pixels, p);
    msk.middleRows(static_cast<Eigen::Index>(b) * n, n) = mask_patches(batch[b].mask, p);
  }
  Var image_tokens = patch_image_.apply(tape, tape.constant(std::move(pix)));
  Var mask_tokens = patch_mask_.apply(tape, tape.constant(std::move(msk)));
  Var patch_pos = autodiff::slice_rows(tape.parameter(positional_), 1, n);
  return autodiff::add_tiled(image_tokens + mask_tokens, patch_pos);
}

Var VisionEncoder::attention(Tape& tape, const Block& block, Var x, int batch, AttentionCapture* capture) const {
  Var qkv = block.qkv.apply(tape, x);
  std::vector<Matrix> probs;
  Var heads = autodiff::multi_head_attention(qkv, batch, config_.heads, capture ? &probs : nullptr);
  if (capture != nullptr) {
    const int tokens = config_.num_patches() + 1;
    capture->class_attention.clear();
    for (int b = 0; b < batch; ++b) {
      Matrix rows(config_.heads, tokens);
      for (int h = 0; h < config_.heads; ++h) rows.row(h) = probs[static_cast<std::size_t>(b) * config_.heads + h].row(0);
      capture->class_attention.push_back(std::move(rows));
    }
  }
  return block.attn_out.apply(tape, heads);
}

VisionEncoder::Output VisionEncoder::forward(Tape& tape, std::span<const MaskedImage> batch,
                                             AttentionCapture* capture) const {
  const int n = config_.num_patches();
  const int tokens = n + 1;
  const int bsz = static_cast<int>(batch.size());
  Var patches = embed_patches(tape, batch);
  Var cls = tape.parameter(class_token_) + autodiff::slice_rows(tape.parameter(positional_), 0, 1);

  // [cls, patch_0 .. patch_{n-1}] per sample.
  std::vector<Var> parts;
  parts.reserve(2 * batch.size());
  for (int b = 0; b < bsz; ++b) {
    parts.push_back(cls);
    parts.push_back(autodiff::slice_rows(patches, static_cast<Eigen::Index>(b) * n, n));
  }
  Var x = autodiff::concat_rows(parts);

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& blk = blocks_[i];
    const bool last = i + 1 == blocks_.size();
    Var h = autodiff::layer_norm(x, tape.parameter(blk.ln1_gamma), tape.parameter(blk.ln1_beta));
    x = x + attention(tape, blk, h, bsz, last ? capture : nullptr);
    h = autodiff::layer_norm(x, tape.parameter(blk.ln2_gamma), tape.parameter(blk.ln2_beta));
    x = x + blk.fc2.apply(tape, autodiff::gelu(blk.fc1.apply(tape, h)));
  }
  Var y = autodiff::layer_norm(x, tape.parameter(ln_post_gamma_), tape.parameter(ln_post_beta_));

  std::vector<Eigen::Index> cls_rows;
  std::vector<Eigen::Index> patch_rows;
  for (int b = 0; b < bsz; ++b) {
    cls_rows.push_back(static_cast<Eigen::Index>(b) * tokens);
    for (int k = 1; k < tokens; ++k) patch_rows.push_back(static_cast<Eigen::Index>(b) * tokens + k);
  }
  Var global = autodiff::l2_normalize_rows(
      autodiff::matmul(autodiff::gather_rows(y, std::move(cls_rows)), tape.parameter(proj_)));
  Var dense = autodiff::gather_rows(y, std::move(patch_rows));
  return {global, dense};
}

Matrix embed_patches(const VisionEncoder& encoder, const MaskedImage& input) {
  Tape tape(false);
  return encoder.embed_patches(tape, std::span<const MaskedImage>(&input, 1)).value();
}

VisionOutput encode_vision(const VisionEncoder& encoder, const MaskedImage& input) {
  Tape tape(false);
  auto out = encoder.forward(tape, std::span<const MaskedImage>(&input, 1));
  return {out.global.value().row(0), DenseFeatureMap{encoder.config().grid(), out.dense.value()}};
}

// --- text ----------------------------------------------------------------

void TextEncoderConfig::validate() const {
  if (frozen_dim <= 0 || adaptor_layers <= 0 || proj_dim <= 0 || max_positions <= 0) {
    throw ValidationError("text config: all sizes must be positive");
  }
}

FrozenTextTower::FrozenTextTower(const TextEncoderConfig& config) : dim_(config.frozen_dim), seed_(config.seed) {
  config.validate();
  std::mt19937_64 rng(splitmix64(seed_ ^ 0x706f736974696f6eULL));
  position_gain_.resize(config.max_positions, dim_);
  for (Eigen::Index i = 0; i < position_gain_.size(); ++i) position_gain_.data()[i] = uniform(rng, 0.5, 1.5);
}

Eigen::RowVectorXd FrozenTextTower::token_vector(std::string_view token) const {
  std::mt19937_64 rng(splitmix64(fnv1a64(token) ^ seed_));
  Eigen::RowVectorXd v(dim_);
  for (int i = 0; i < dim_; ++i) v[i] = uniform(rng, -1.0, 1.0);
  return v;
}

Eigen::RowVectorXd FrozenTextTower::encode(std::string_view text) const {
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dim_);
  int count = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      const auto pos = static_cast<Eigen::Index>(count % position_gain_.rows());
      acc += token_vector(text.substr(i, j - i)).cwiseProduct(position_gain_.row(pos));
      ++count;
    }
    i = j;
  }
  if (count == 0) throw ValidationError("text is empty");
  return acc / static_cast<double>(count);
}

std::uint64_t FrozenTextTower::parameter_hash() const {
  std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&seed_), sizeof(seed_)));
  h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&dim_), sizeof(dim_)), h);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(position_gain_.data()),
                                  sizeof(double) * static_cast<std::size_t>(position_gain_.size())),
                 h);
}

TextEncoder::TextEncoder(const TextEncoderConfig& config, std::uint64_t projector_seed)
    : config_(config), frozen_(config) {
  std::mt19937_64 rng(splitmix64(projector_seed ^ 0x74657874ULL));
  for (int i = 0; i < config_.adaptor_layers; ++i) {
    const bool last = i + 1 == config_.adaptor_layers;
    adaptor_.push_back(make_linear(rng, "text.adaptor." + std::to_string(i), config_.frozen_dim,
                                   last ? config_.proj_dim : config_.frozen_dim));
  }
}

Matrix TextEncoder::frozen_features(std::span<const std::string> texts) const {
  Matrix out(static_cast<Eigen::Index>(texts.size()), config_.frozen_dim);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      out.row(static_cast<Eigen::Index>(i)) = frozen_.encode(texts[i]);
    } catch (const ValidationError& e) {
      throw ValidationError("text " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

Var TextEncoder::forward(Tape& tape, std::span<const std::string> texts) const {
  if (texts.empty()) throw ValidationError("empty text batch");
  Var x = tape.constant(frozen_features(texts));
  for (std::size_t i = 0; i < adaptor_.size(); ++i) {
    x = adaptor_[i].apply(tape, x);
    if (i + 1 < adaptor_.size()) x = autodiff::gelu(x);
  }
  return autodiff::l2_normalize_rows(x);
}

std::vector<Parameter*> TextEncoder::parameters() {
  std::vector<Parameter*> out;
  for (Linear& l : adaptor_) push_linear(out, l);
  return out;
}

std::vector<const Parameter*> TextEncoder::parameters() const {
  auto mut = const_cast<TextEncoder*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

Embedding encode_text(const TextEncoder& encoder, std::string_view text) {
  Tape tape(false);
  const std::string s(text);
  return encoder.forward(tape, std::span<const std::string>(&s, 1)).value().row(0);
}

}  // namespace pixlab
