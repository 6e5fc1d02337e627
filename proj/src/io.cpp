#include "ddsa/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ddsa {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Images

std::uint8_t to_u8(double v) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::min(scaled, 255.0));
}

Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw ImageError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ImageError("corrupt PNG " + path.string() + ": " + msg);
  }
  const std::int64_t h = image.height, w = image.width;
  Tensor img(Shape{3, h, w});
  auto d = img.mutable_data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        d[static_cast<std::size_t>((c * h + y) * w + x)] =
            from_u8(buf[static_cast<std::size_t>((y * w + x) * 3 + c)]);
  return img;
}

void write_png(const std::filesystem::path& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("write_png expects [3,h,w], got " + shape_str(img.shape()));
  }
  const std::int64_t h = img.dim(1), w = img.dim(2);
  const auto d = img.data();
  std::vector<png_byte> buf(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        buf[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            to_u8(d[static_cast<std::size_t>((c * h + y) * w + x)]);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

std::vector<std::string> list_pngs(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

[[noreturn]] void bad(const std::string& field, const std::string& what) {
  throw ConfigError(field + ": " + what);
}

double as_double(const json& v, const std::string& field) {
  if (!v.is_number()) bad(field, "expected a number");
  return v.get<double>();
}

std::int64_t as_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) bad(field, "expected an integer");
  return v.get<std::int64_t>();
}

bool as_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) bad(field, "expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& field) {
  if (!v.is_string()) bad(field, "expected a string");
  return v.get<std::string>();
}

std::vector<int> as_int_list(const json& v, const std::string& field) {
  if (!v.is_array()) bad(field, "expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(static_cast<int>(as_int(v[i], field + "[" + std::to_string(i) + "]")));
  }
  return out;
}

std::pair<double, double> as_pair(const json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 2) bad(field, "expected an array of two numbers");
  return {as_double(v[0], field + "[0]"), as_double(v[1], field + "[1]")};
}

void require_object(const json& j, const std::string& field) {
  if (!j.is_object()) bad(field, "expected an object");
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{
      {"base_channels", c.base_channels},
      {"levels", c.levels},
      {"depths", c.depths},
      {"heads_per_level", c.heads},
      {"k_ratio", c.k_ratio},
      {"branch_weights", {c.branch_weights.dense, c.branch_weights.sparse}},
      {"learnable_branch_weights", c.learnable_branch_weights},
      {"use_dense", c.use_dense},
      {"use_sparse", c.use_sparse},
      {"use_multiscale", c.use_multiscale},
      {"use_sa", c.use_sa},
      {"attention_axis", c.attention_axis == AttentionAxis::spatial ? "spatial" : "channel"},
      {"mask_mode", c.mask_mode == MaskMode::sentinel ? "sentinel" : "literal_zero"},
      {"ffn_expansion", c.ffn_expansion},
  };
}

json to_json(const TrainConfig& c) {
  return json{
      {"lr", c.lr},
      {"total_steps", c.total_steps},
      {"fixed_lr_steps", c.fixed_lr_steps},
      {"batch_size", c.batch_size},
      {"patch_size", c.patch_size},
      {"betas", {c.beta1, c.beta2}},
      {"eps", c.eps},
      {"weight_decay", c.weight_decay},
      {"augment", c.augment},
      {"checkpoint_every", c.checkpoint_every},
  };
}

json to_json(const DataConfig& c) {
  return json{
      {"pairs_dir", c.pairs_dir},   {"clean_dir", c.clean_dir}, {"num_images", c.num_images},
      {"image_size", c.image_size}, {"severity", c.severity},
  };
}

json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  require_object(j, "model");
  for (const auto& [key, v] : j.items()) {
    const std::string f = "model." + key;
    if (key == "base_channels") c.base_channels = as_int(v, f);
    else if (key == "levels") c.levels = static_cast<int>(as_int(v, f));
    else if (key == "depths") c.depths = as_int_list(v, f);
    else if (key == "heads_per_level") c.heads = as_int_list(v, f);
    else if (key == "k_ratio") c.k_ratio = as_double(v, f);
    else if (key == "branch_weights") {
      const auto [d, s] = as_pair(v, f);
      c.branch_weights = {d, s};
    } else if (key == "learnable_branch_weights") c.learnable_branch_weights = as_bool(v, f);
    else if (key == "use_dense") c.use_dense = as_bool(v, f);
    else if (key == "use_sparse") c.use_sparse = as_bool(v, f);
    else if (key == "use_multiscale") c.use_multiscale = as_bool(v, f);
    else if (key == "use_sa") c.use_sa = as_bool(v, f);
    else if (key == "attention_axis") {
      const std::string s = as_string(v, f);
      if (s == "spatial") c.attention_axis = AttentionAxis::spatial;
      else if (s == "channel") c.attention_axis = AttentionAxis::channel;
      else bad(f, "expected \"spatial\" or \"channel\"");
    } else if (key == "mask_mode") {
      const std::string s = as_string(v, f);
      if (s == "sentinel") c.mask_mode = MaskMode::sentinel;
      else if (s == "literal_zero") c.mask_mode = MaskMode::literal_zero;
      else bad(f, "expected \"sentinel\" or \"literal_zero\"");
    } else if (key == "ffn_expansion") c.ffn_expansion = as_double(v, f);
    else bad(f, "unknown key");
  }
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  require_object(j, "train");
  for (const auto& [key, v] : j.items()) {
    const std::string f = "train." + key;
    if (key == "lr") c.lr = as_double(v, f);
    else if (key == "total_steps") c.total_steps = as_int(v, f);
    else if (key == "fixed_lr_steps") c.fixed_lr_steps = as_int(v, f);
    else if (key == "batch_size") c.batch_size = as_int(v, f);
    else if (key == "patch_size") c.patch_size = as_int(v, f);
    else if (key == "betas") {
      const auto [b1, b2] = as_pair(v, f);
      c.beta1 = b1;
      c.beta2 = b2;
    } else if (key == "eps") c.eps = as_double(v, f);
    else if (key == "weight_decay") c.weight_decay = as_double(v, f);
    else if (key == "augment") c.augment = as_bool(v, f);
    else if (key == "checkpoint_every") c.checkpoint_every = as_int(v, f);
    else bad(f, "unknown key");
  }
  return c;
}

namespace {

DataConfig data_config_from_json(const json& j, DataConfig c) {
  require_object(j, "data");
  for (const auto& [key, v] : j.items()) {
    const std::string f = "data." + key;
    if (key == "pairs_dir") c.pairs_dir = as_string(v, f);
    else if (key == "clean_dir") c.clean_dir = as_string(v, f);
    else if (key == "num_images") c.num_images = as_int(v, f);
    else if (key == "image_size") c.image_size = as_int(v, f);
    else if (key == "severity") c.severity = as_double(v, f);
    else bad(f, "unknown key");
  }
  return c;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
  require_object(j, "config");
  RunConfig c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = model_config_from_json(v, c.model);
    else if (key == "train") c.train = train_config_from_json(v, c.train);
    else if (key == "data") c.data = data_config_from_json(v, c.data);
    else if (key == "seed") {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        bad("seed", "expected a non-negative integer");
      }
      c.seed = v.get<std::uint64_t>();
    } else bad(key, "unknown key");
  }
  c.train.seed = c.seed;
  return c;
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") {
    c.model = ModelConfig::desk();
    c.train = TrainConfig::desk();
  } else if (name == "paper") {
    c.model = ModelConfig::paper();
    c.train = TrainConfig::paper();
    c.data.image_size = 128;
  } else {
    throw ConfigError("preset: expected \"desk\" or \"paper\", got \"" + name + "\"");
  }
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate(model.spatial_multiple());
  if (data.num_images <= 0) throw ConfigError("data.num_images must be positive");
  if (data.image_size < train.patch_size) {
    throw ConfigError("data.image_size must be >= train.patch_size");
  }
  if (data.severity < 0.0) throw ConfigError("data.severity must be >= 0");
  if (!data.pairs_dir.empty() && !data.clean_dir.empty()) {
    throw ConfigError("data.pairs_dir and data.clean_dir are mutually exclusive");
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j, base);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'D', 'S', 'A', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

std::vector<float> to_f32(std::span<const double> values) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
  return out;
}

std::vector<float> to_f32(const std::vector<double>& values) {
  return to_f32(std::span<const double>(values));
}

}  // namespace

Checkpoint make_checkpoint(const DerainNet& model, const TrainConfig& train, const OptState* opt,
                           std::int64_t step) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.step = step;
  const ParamList params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    c.params.push_back({p.name, p.tensor.shape(), to_f32(p.tensor.data())});
    if (opt) {
      c.adam_m.push_back({p.name, p.tensor.shape(), to_f32(opt->m.at(i))});
      c.adam_v.push_back({p.name, p.tensor.shape(), to_f32(opt->v.at(i))});
    }
  }
  if (opt) c.adam_step = opt->step;
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json tables = json::array();
  std::string payload;
  auto add_table = [&](const std::vector<CheckpointArray>& arrays, const char* group) {
    for (const auto& a : arrays) {
      if (shape_numel(a.shape) != static_cast<std::int64_t>(a.values.size())) {
        throw CheckpointError("checkpoint array " + a.name + " does not match its shape");
      }
      tables.push_back({{"group", group},
                        {"name", a.name},
                        {"shape", a.shape},
                        {"offset", payload.size()}});
      for (float f : a.values) put_le(payload, std::bit_cast<std::uint32_t>(f));
    }
  };
  add_table(ckpt.params, "param");
  add_table(ckpt.adam_m, "adam_m");
  add_table(ckpt.adam_v, "adam_v");

  json train = to_json(ckpt.train);
  train["seed"] = ckpt.train.seed;
  const json manifest{{"format_version", kCheckpointVersion},
                      {"model", to_json(ckpt.model)},
                      {"train", train},
                      {"step", ckpt.step},
                      {"adam_step", ckpt.adam_step},
                      {"tensors", tables},
                      {"payload_bytes", payload.size()}};
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  put_le(out, crc);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 8 + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes, sizeof kMagic);
  const std::size_t manifest_at = sizeof kMagic + 8;
  if (manifest_len > bytes.size() - manifest_at - 4) throw CheckpointError("truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(manifest_at, manifest_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  const std::size_t payload_at = manifest_at + manifest_len;
  const std::size_t payload_len = bytes.size() - payload_at - 4;
  const auto stored_crc = get_le<std::uint32_t>(bytes, bytes.size() - 4);
  const auto crc = static_cast<std::uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data() + payload_at), static_cast<uInt>(payload_len)));
  if (crc != stored_crc) throw CheckpointError("checkpoint CRC32 mismatch: payload is corrupt");

  Checkpoint c;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint format version");
    }
    if (manifest.at("payload_bytes").get<std::size_t>() != payload_len) {
      throw CheckpointError("payload length does not match manifest");
    }
    c.model = model_config_from_json(manifest.at("model"));
    json train = manifest.at("train");
    c.train.seed = train.at("seed").get<std::uint64_t>();
    train.erase("seed");
    const std::uint64_t seed = c.train.seed;
    c.train = train_config_from_json(train);
    c.train.seed = seed;
    c.step = manifest.at("step").get<std::int64_t>();
    c.adam_step = manifest.at("adam_step").get<std::int64_t>();
    std::size_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      CheckpointArray a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto n = static_cast<std::size_t>(shape_numel(a.shape));
      if (offset != expected_offset || offset + 4 * n > payload_len) {
        throw CheckpointError("tensor " + a.name + " has an inconsistent offset");
      }
      a.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        a.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, payload_at + offset + 4 * i));
      }
      expected_offset = offset + 4 * n;
      const std::string group = t.at("group").get<std::string>();
      if (group == "param") c.params.push_back(std::move(a));
      else if (group == "adam_m") c.adam_m.push_back(std::move(a));
      else if (group == "adam_v") c.adam_v.push_back(std::move(a));
      else throw CheckpointError("unknown tensor group " + group);
    }
    if (expected_offset != payload_len) {
      throw CheckpointError("manifest shapes do not cover the payload");
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void apply_checkpoint(const Checkpoint& ckpt, const DerainNet& model, OptState* opt) {
  const ParamList params = model.parameters();
  if (params.size() != ckpt.params.size()) {
    throw CheckpointMismatch("checkpoint has " + std::to_string(ckpt.params.size()) +
                             " parameter tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& a = ckpt.params[i];
    if (a.name != params[i].name || a.shape != params[i].tensor.shape()) {
      throw CheckpointMismatch("checkpoint tensor " + a.name + " " + shape_str(a.shape) +
                               " does not match model tensor " + params[i].name + " " +
                               shape_str(params[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto d = t.mutable_data();
    const auto& v = ckpt.params[i].values;
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<double>(v[j]);
  }
  if (opt) {
    *opt = make_opt_state(params);
    opt->step = ckpt.adam_step;
    if (ckpt.adam_m.empty()) return;
    if (ckpt.adam_m.size() != params.size() || ckpt.adam_v.size() != params.size()) {
      throw CheckpointMismatch("checkpoint optimizer state does not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& m = opt->m[i];
      auto& v = opt->v[i];
      if (ckpt.adam_m[i].values.size() != m.size() || ckpt.adam_v[i].values.size() != v.size()) {
        throw CheckpointMismatch("optimizer moment shape mismatch for " + params[i].name);
      }
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] = static_cast<double>(ckpt.adam_m[i].values[j]);
        v[j] = static_cast<double>(ckpt.adam_v[i].values[j]);
      }
    }
  }
}

DerainNet model_from_checkpoint(const Checkpoint& ckpt) {
  DerainNet model(ckpt.model, 0);
  apply_checkpoint(ckpt, model);
  return model;
}

}  // namespace ddsa
