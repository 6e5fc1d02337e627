#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddsa/model.hpp"
#include "ddsa/tensor.hpp"
#include "ddsa/training.hpp"

namespace ddsa {

// ---------------------------------------------------------------------------
// Images

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Round-half-up quantization of a [0,1] value (clamped) to 8 bits.
std::uint8_t to_u8(double v);
inline double from_u8(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

/// Reads an 8-bit PNG as RGB [3,h,w] in [0,1]. Gray and alpha inputs are
/// converted to RGB. Throws ImageError on unreadable or corrupt files.
Tensor read_png(const std::filesystem::path& path);
/// Writes an RGB [3,h,w] tensor as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const Tensor& img);

/// Sorted *.png file names (not paths) in `dir`.
std::vector<std::string> list_pngs(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::string pairs_dir;  // contains rainy/ and clean/ with matching names
  std::string clean_dir;  // clean sources; rain is synthesized
  std::int64_t num_images = 4;
  std::int64_t image_size = 64;
  double severity = 0.5;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 0;

  static RunConfig preset(const std::string& name);  // "desk" or "paper"
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Strict parsing on top of `base`: every key must be known and correctly
/// typed, otherwise ConfigError names the field (e.g. "model.k_ratio").
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base);

/// Reads and parses a config file over `base` and validates the result.
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "DDSACKPT" | u64 LE manifest length | manifest JSON |
//         LE f32 payload (arrays in manifest order) | u32 LE CRC32(payload)

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint does not fit the model it is applied to.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::int64_t step = 0;
  std::vector<CheckpointArray> params;
  /// AdamW first/second moments, same order and shapes as `params`; empty
  /// when saved without optimizer state.
  std::vector<CheckpointArray> adam_m;
  std::vector<CheckpointArray> adam_v;
  std::int64_t adam_step = 0;
};

Checkpoint make_checkpoint(const DerainNet& model, const TrainConfig& train,
                           const OptState* opt, std::int64_t step);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameters (and moments, when `opt` is given) into `model`.
/// Throws CheckpointMismatch if names, order or shapes differ.
void apply_checkpoint(const Checkpoint& ckpt, const DerainNet& model, OptState* opt = nullptr);

/// Model built from the checkpoint's config with its parameters loaded.
DerainNet model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ddsa
