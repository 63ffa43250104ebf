#pragma once

#include "pixlab/autodiff.hpp"
#include "pixlab/image.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pixlab {

using Embedding = Eigen::RowVectorXd;
using EmbeddingBatch = Matrix;  // one embedding per row, batch-aligned by index

// Per-patch features on a grid x grid lattice, row-major.
struct DenseFeatureMap {
  int grid = 0;
  Matrix features;  // grid*grid x embed_dim
};

struct VisionEncoderConfig {
  int patch_size = 4;
  int embed_dim = 32;
  int depth = 2;
  int heads = 4;
  int proj_dim = 32;
  int input_resolution = 32;
  int mlp_ratio = 4;

  int grid() const { return input_resolution / patch_size; }
  int num_patches() const { return grid() * grid(); }
  void validate() const;
  bool operator==(const VisionEncoderConfig&) const = default;
};

// A dense layer y = x W + b (b optional).
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  autodiff::Var apply(autodiff::Tape& tape, autodiff::Var x) const;
};

// Last-block attention of the class token; one row per head over all
// tokens (class token first).
struct AttentionCapture {
  std::vector<Matrix> class_attention;  // one heads x (G*G+1) matrix per image
};

class VisionEncoder {
 public:
  struct Output {
    autodiff::Var global;  // B x proj_dim, unit rows
    autodiff::Var dense;   // (B*G*G) x embed_dim, post final layer norm
  };

  VisionEncoder(const VisionEncoderConfig& config, std::uint64_t seed);

  const VisionEncoderConfig& config() const { return config_; }

  // Conv_I(pixels) + Conv_M(mask) + P for every patch; (B*G*G) x embed_dim.
  autodiff::Var embed_patches(autodiff::Tape& tape, std::span<const MaskedImage> batch) const;
  Output forward(autodiff::Tape& tape, std::span<const MaskedImage> batch,
                 AttentionCapture* capture = nullptr) const;
  // The class-token projection head, exposed for the shared pooling mode.
  const Parameter& projection() const { return proj_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  struct Block {
    Parameter ln1_gamma, ln1_beta;
    Linear qkv;
    Linear attn_out;
    Parameter ln2_gamma, ln2_beta;
    Linear fc1;
    Linear fc2;
  };

  void check_input(const MaskedImage& input) const;
  autodiff::Var attention(autodiff::Tape& tape, const Block& block, autodiff::Var x, int batch,
                          AttentionCapture* capture) const;

  VisionEncoderConfig config_;
  Linear patch_image_;  // Conv_I as a matmul over flattened patches
  Linear patch_mask_;   // Conv_M; zero-initialized
  Parameter class_token_;
  Parameter positional_;  // (G*G + 1) x embed_dim; row 0 belongs to the class token
  std::vector<Block> blocks_;
  Parameter ln_post_gamma_, ln_post_beta_;
  Parameter proj_;
};

struct TextEncoderConfig {
  int frozen_dim = 64;
  int adaptor_layers = 4;
  int proj_dim = 32;
  int max_positions = 256;
  std::uint64_t seed = 0x5eed7e47;

  void validate() const;
  bool operator==(const TextEncoderConfig&) const = default;
};

// Frozen stand-in for a large language model text tower. Each whitespace
// token maps to a fixed pseudo-random vector derived from its bytes and the
// seed; token vectors are modulated by a fixed per-position gain so word
// order matters, then mean-pooled.
class FrozenTextTower {
 public:
  explicit FrozenTextTower(const TextEncoderConfig& config);

  Eigen::RowVectorXd encode(std::string_view text) const;
  // Digest of everything that determines encode().
  std::uint64_t parameter_hash() const;
  int dim() const { return dim_; }

 private:
  Eigen::RowVectorXd token_vector(std::string_view token) const;

  int dim_;
  std::uint64_t seed_;
  Matrix position_gain_;
};

class TextEncoder {
 public:
  TextEncoder(const TextEncoderConfig& config, std::uint64_t projector_seed);

  const TextEncoderConfig& config() const { return config_; }
  const FrozenTextTower& frozen() const { return frozen_; }

  // Frozen features of each text, stacked; rejects empty strings.
  Matrix frozen_features(std::span<const std::string> texts) const;
  // Trainable adaptor + L2 normalization; B x proj_dim.
  autodiff::Var forward(autodiff::Tape& tape, std::span<const std::string> texts) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  TextEncoderConfig config_;
  FrozenTextTower frozen_;
  std::vector<Linear> adaptor_;
};

// Non-differentiable conveniences over a single input.
Matrix embed_patches(const VisionEncoder& encoder, const MaskedImage& input);

struct VisionOutput {
  Embedding global;
  DenseFeatureMap dense;
};
VisionOutput encode_vision(const VisionEncoder& encoder, const MaskedImage& input);

Embedding encode_text(const TextEncoder& encoder, std::string_view text);

// Flattens each patch of the image to 3*p*p values (row, col, channel order)
// and each mask patch to p*p values; rows follow row-major patch order.
Matrix image_patches(const Image& image, int patch_size);
Matrix mask_patches(const Mask& mask, int patch_size);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace pixlab
