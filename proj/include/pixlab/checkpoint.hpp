#pragma once

#include "pixlab/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace pixlab {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Binary container:
//   "PIXLABCK" | u32 version | u64 n | n bytes of config JSON |
//   u64 count | count x (u32 name_len | name | u32 rows | u32 cols | rows*cols f64)
// All integers and doubles little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const PixModel& model);
// Loads whatever configuration the file holds.
PixModel load_checkpoint(const std::filesystem::path& path);
// Rejects the file if its stored configuration differs from `expected`.
PixModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

// Hex FNV-1a digest of the file bytes; used to tag evaluation reports.
std::string checkpoint_id(const std::filesystem::path& path);

}  // namespace pixlab
