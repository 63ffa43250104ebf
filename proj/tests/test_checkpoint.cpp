#include "pixlab/checkpoint.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace pixlab;
using pixlab::testing::TempDir;
using pixlab::testing::tiny_model_config;

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  PixModel model(tiny_model_config(5));
  std::mt19937_64 rng(5);
  for (Parameter* p : model.parameters()) p->value = pixlab::testing::random_matrix(rng, p->value.rows(), p->value.cols());
  const auto path = dir.path / "m.ckpt";
  save_checkpoint(path, model);
  const PixModel loaded = load_checkpoint(path, model.config());
  EXPECT_EQ(loaded.config(), model.config());
  const auto a = model.parameters();
  const auto b = loaded.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  }
  const MaskedImage in = make_masked_image(pixlab::testing::random_image(rng, 8, 8), pixlab::testing::random_mask(rng, 8, 8));
  EXPECT_EQ(infer_embedding(model, in), infer_embedding(loaded, in));
  EXPECT_EQ(infer_text_embedding(model, "a red square"), infer_text_embedding(loaded, "a red square"));

  save_checkpoint(dir.path / "again.ckpt", loaded);
  EXPECT_EQ(checkpoint_id(path), checkpoint_id(dir.path / "again.ckpt"));
  EXPECT_EQ(checkpoint_id(path).size(), 16u);
}

TEST(Checkpoint, ConfigMismatchIsRejected) {
  TempDir dir("ckpt");
  PixModel model(tiny_model_config(5));
  save_checkpoint(dir.path / "m.ckpt", model);
  ModelConfig other = model.config();
  other.vision.depth = 2;
  EXPECT_THROW(load_checkpoint(dir.path / "m.ckpt", other), CheckpointError);
  other = model.config();
  other.region_projection = ProjectionMode::kShared;
  EXPECT_THROW(load_checkpoint(dir.path / "m.ckpt", other), CheckpointError);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir dir("ckpt");
  EXPECT_THROW(load_checkpoint(dir.path / "missing.ckpt"), CheckpointError);
  {
    std::ofstream(dir.path / "bad.ckpt") << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(dir.path / "bad.ckpt"), CheckpointError);

  PixModel model(tiny_model_config(5));
  save_checkpoint(dir.path / "m.ckpt", model);
  std::string bytes = pixlab::testing::read_file(dir.path / "m.ckpt");
  bytes.resize(bytes.size() - 9);
  {
    std::ofstream(dir.path / "short.ckpt", std::ios::binary) << bytes;
  }
  EXPECT_THROW(load_checkpoint(dir.path / "short.ckpt"), CheckpointError);
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
  ModelConfig mc = tiny_model_config(77);
  mc.region_projection = ProjectionMode::kShared;
  mc.overlap_threshold = 0.25;
  mc.text.seed = 123456789012345ULL;
  EXPECT_EQ(model_config_from_json(to_json(mc)), mc);
}
