#include "pixlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace pixlab {

using nlohmann::json;

json to_json(const ModelConfig& c) {
  return json{
      {"vision",
       {{"patch_size", c.vision.patch_size},
        {"embed_dim", c.vision.embed_dim},
        {"depth", c.vision.depth},
        {"heads", c.vision.heads},
        {"proj_dim", c.vision.proj_dim},
        {"input_resolution", c.vision.input_resolution},
        {"mlp_ratio", c.vision.mlp_ratio}}},
      {"text",
       {{"frozen_dim", c.text.frozen_dim},
        {"adaptor_layers", c.text.adaptor_layers},
        {"proj_dim", c.text.proj_dim},
        {"max_positions", c.text.max_positions},
        {"seed", c.text.seed}}},
      {"overlap_threshold", c.overlap_threshold},
      {"region_projection", c.region_projection == ProjectionMode::kShared ? "shared" : "separate"},
      {"log_scale_init", c.log_scale_init},
      {"log_scale_max", c.log_scale_max},
      {"seed", c.seed},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  const json& v = j.at("vision");
  c.vision.patch_size = v.at("patch_size").get<int>();
  c.vision.embed_dim = v.at("embed_dim").get<int>();
  c.vision.depth = v.at("depth").get<int>();
  c.vision.heads = v.at("heads").get<int>();
  c.vision.proj_dim = v.at("proj_dim").get<int>();
  c.vision.input_resolution = v.at("input_resolution").get<int>();
  c.vision.mlp_ratio = v.at("mlp_ratio").get<int>();
  const json& t = j.at("text");
  c.text.frozen_dim = t.at("frozen_dim").get<int>();
  c.text.adaptor_layers = t.at("adaptor_layers").get<int>();
  c.text.proj_dim = t.at("proj_dim").get<int>();
  c.text.max_positions = t.at("max_positions").get<int>();
  c.text.seed = t.at("seed").get<std::uint64_t>();
  c.overlap_threshold = j.at("overlap_threshold").get<double>();
  const std::string mode = j.at("region_projection").get<std::string>();
  if (mode != "shared" && mode != "separate") throw CheckpointError("unknown region_projection '" + mode + "'");
  c.region_projection = mode == "shared" ? ProjectionMode::kShared : ProjectionMode::kSeparate;
  c.log_scale_init = j.at("log_scale_init").get<double>();
  c.log_scale_max = j.at("log_scale_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw CheckpointError("checkpoint truncated");
  return value;
}

constexpr char kMagic[8] = {'P', 'I', 'X', 'L', 'A', 'B', 'C', 'K'};

struct RawCheckpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Matrix>> params;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto json_len = get<std::uint64_t>(in);
  std::string text(json_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw CheckpointError("checkpoint truncated");
  RawCheckpoint raw;
  try {
    raw.config = model_config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw CheckpointError("checkpoint truncated in parameter " + name);
    raw.params.emplace_back(std::move(name), std::move(m));
  }
  return raw;
}

PixModel materialize(RawCheckpoint raw) {
  PixModel model(raw.config);
  const auto params = model.parameters();
  if (params.size() != raw.params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(raw.params.size()) + " parameters, model expects " +
                          std::to_string(params.size()));
  }
  for (auto& [name, value] : raw.params) {
    Parameter* p = model.find_parameter(name);
    if (p == nullptr) throw CheckpointError("unexpected parameter " + name);
    if (p->value.rows() != value.rows() || p->value.cols() != value.cols()) {
      throw CheckpointError("shape mismatch for parameter " + name);
    }
    p->value = std::move(value);
  }
  return model;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PixModel& model) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = to_json(model.config()).dump();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (const Parameter* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
  // Write-then-rename so a failed save never leaves a partial checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary);
    if (!file) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::string bytes = out.str();
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw CheckpointError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

PixModel load_checkpoint(const std::filesystem::path& path) { return materialize(read_raw(path)); }

PixModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  RawCheckpoint raw = read_raw(path);
  if (!(raw.config == expected)) {
    throw CheckpointError("checkpoint config disagrees with the requested config: stored " +
                          to_json(raw.config).dump() + ", requested " + to_json(expected).dump());
  }
  return materialize(std::move(raw));
}

std::string checkpoint_id(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::uint64_t h = fnv1a64(buf.str());
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace pixlab
