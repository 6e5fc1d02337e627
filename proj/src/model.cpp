#include "ddsa/model.hpp"

#include "ddsa/ops.hpp"

namespace ddsa {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.base_channels = 48;
  c.depths = {2, 4, 6, 6, 8};
  c.heads = {1, 1, 2, 4, 8};
  c.k_ratio = 0.7;
  return c;
}

ModelConfig ModelConfig::ablation(char row) {
  ModelConfig c = desk();
  switch (row) {
    case 'a':
      c.use_sparse = false;
      break;
    case 'b':
      c.use_dense = false;
      break;
    case 'c':
      break;
    case 'd':
      c.use_sa = false;
      break;
    default:
      throw ConfigError(std::string("unknown ablation row '") + row + "'");
  }
  return c;
}

void ModelConfig::validate() const {
  if (levels < 1) throw ConfigError("model.levels must be >= 1");
  if (base_channels <= 0) throw ConfigError("model.base_channels must be positive");
  const auto expected = static_cast<std::size_t>(levels + 1);
  if (depths.size() != expected) {
    throw ConfigError("model.depths must have " + std::to_string(expected) + " entries");
  }
  if (heads.size() != expected) {
    throw ConfigError("model.heads_per_level must have " + std::to_string(expected) + " entries");
  }
  for (int l = 0; l <= levels; ++l) {
    const auto i = static_cast<std::size_t>(l);
    if (depths[i] < 0) throw ConfigError("model.depths entries must be >= 0");
    if (heads[i] <= 0) throw ConfigError("model.heads_per_level entries must be positive");
    if (channels_at(l) % heads[i] != 0) {
      throw ConfigError("model.heads_per_level[" + std::to_string(l) + "]=" +
                        std::to_string(heads[i]) + " does not divide " +
                        std::to_string(channels_at(l)) + " channels");
    }
  }
  if (!(k_ratio > 0.0 && k_ratio <= 1.0)) throw ConfigError("model.k_ratio must be in (0, 1]");
  if (branch_weights.dense < 0.0 || branch_weights.sparse < 0.0) {
    throw ConfigError("model.branch_weights must be non-negative");
  }
  if (!use_dense && !use_sparse) {
    throw ConfigError("model.use_dense and model.use_sparse cannot both be false");
  }
  if (!(ffn_expansion > 0.0)) throw ConfigError("model.ffn_expansion must be positive");
}

DdsaOptions ModelConfig::ddsa_options(int heads_at_level) const {
  DdsaOptions o;
  o.heads = heads_at_level;
  o.k_ratio = k_ratio;
  o.weights = branch_weights;
  if (!use_sparse) o.weights = {1.0, 0.0};
  if (!use_dense) o.weights = {0.0, 1.0};
  o.learnable_weights = learnable_branch_weights && use_dense && use_sparse;
  o.axis = attention_axis;
  o.mask_mode = mask_mode;
  return o;
}

SefnOptions ModelConfig::sefn_options() const {
  return SefnOptions{ffn_expansion, use_multiscale, use_sa};
}

void DatbBlock::collect(ParamList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  ddsa.collect(out, prefix + ".ddsa");
  ln2.collect(out, prefix + ".ln2");
  sefn.collect(out, prefix + ".sefn");
}

DatbBlock make_datb(std::int64_t channels, int heads, const ModelConfig& cfg, Rng& rng) {
  DatbBlock b;
  b.ln1 = make_layer_norm(channels);
  b.ddsa = make_ddsa(channels, cfg.ddsa_options(heads), rng);
  b.ln2 = make_layer_norm(channels);
  b.sefn = make_sefn(channels, cfg.sefn_options(), rng);
  return b;
}

Tensor datb_forward(const Tensor& x, const DatbBlock& block) {
  if (x.rank() != 4 || x.dim(1) != block.ln1.channels()) {
    throw ShapeError("datb_forward: block has " + std::to_string(block.ln1.channels()) +
                     " channels, input is " + shape_str(x.shape()));
  }
  const Tensor attended = add(x, ddsa_forward(layer_norm(x, block.ln1), block.ddsa));
  return add(attended, sefn_forward(layer_norm(attended, block.ln2), block.sefn));
}

DerainNet::DerainNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int L = cfg_.levels;
  embed_ = make_conv(3, cfg_.base_channels, 3, 1, true, rng);
  encoder_.resize(static_cast<std::size_t>(L));
  decoder_.resize(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    const auto i = static_cast<std::size_t>(l);
    for (int j = 0; j < cfg_.depths[i]; ++j) {
      encoder_[i].push_back(make_datb(cfg_.channels_at(l), cfg_.heads[i], cfg_, rng));
    }
    down_.push_back(make_conv(4 * cfg_.channels_at(l), cfg_.channels_at(l + 1), 1, 1, false, rng));
  }
  for (int j = 0; j < cfg_.depths[static_cast<std::size_t>(L)]; ++j) {
    bottleneck_.push_back(make_datb(cfg_.channels_at(L), cfg_.heads[static_cast<std::size_t>(L)], cfg_, rng));
  }
  up_.resize(static_cast<std::size_t>(L));
  fuse_.resize(static_cast<std::size_t>(L));
  for (int l = L - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    const std::int64_t c = cfg_.channels_at(l);
    up_[i] = make_conv(2 * c, 4 * c, 1, 1, false, rng);
    fuse_[i] = make_conv(2 * c, c, 1, 1, false, rng);
    for (int j = 0; j < cfg_.depths[i]; ++j) {
      decoder_[i].push_back(make_datb(c, cfg_.heads[i], cfg_, rng));
    }
  }
  head_ = make_conv(cfg_.base_channels, 3, 3, 1, true, rng);
}

Tensor DerainNet::residual(const Tensor& rainy, ForwardProbe* probe) const {
  if (rainy.rank() != 4 || rainy.dim(1) != 3) {
    throw ShapeError("model expects [b,3,h,w], got " + shape_str(rainy.shape()));
  }
  const std::int64_t m = cfg_.spatial_multiple();
  if (rainy.dim(2) % m != 0 || rainy.dim(3) % m != 0) {
    throw ShapeError("input " + shape_str(rainy.shape()) + " needs padding: height and width " +
                     "must be multiples of " + std::to_string(m));
  }
  const int L = cfg_.levels;
  Tensor x = conv2d(rainy, embed_);
  std::vector<Tensor> skips;
  for (int l = 0; l < L; ++l) {
    for (const auto& b : encoder_[static_cast<std::size_t>(l)]) x = datb_forward(x, b);
    skips.push_back(x);
    x = downsample(x, down_[static_cast<std::size_t>(l)]);
  }
  for (const auto& b : bottleneck_) x = datb_forward(x, b);
  if (probe) probe->decoder_inputs.assign(static_cast<std::size_t>(L), Tensor());
  for (int l = L - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    Tensor skip = skips[i];
    if (probe && probe->zero_skip_level == l) skip = Tensor::zeros(skip.shape());
    x = conv2d(concat({upsample(x, up_[i]), skip}, 1), fuse_[i]);
    if (probe) probe->decoder_inputs[i] = x;
    for (const auto& b : decoder_[i]) x = datb_forward(x, b);
  }
  return conv2d(x, head_);
}

Tensor DerainNet::forward(const Tensor& rainy, ForwardProbe* probe) const {
  return add(rainy, residual(rainy, probe));
}

ParamList DerainNet::parameters() const {
  ParamList out;
  embed_.collect(out, "embed");
  const int L = cfg_.levels;
  for (int l = 0; l < L; ++l) {
    const auto i = static_cast<std::size_t>(l);
    for (std::size_t j = 0; j < encoder_[i].size(); ++j) {
      encoder_[i][j].collect(out, "enc" + std::to_string(l) + ".block" + std::to_string(j));
    }
    down_[i].collect(out, "down" + std::to_string(l));
  }
  for (std::size_t j = 0; j < bottleneck_.size(); ++j) {
    bottleneck_[j].collect(out, "bottleneck.block" + std::to_string(j));
  }
  for (int l = L - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    up_[i].collect(out, "up" + std::to_string(l));
    fuse_[i].collect(out, "fuse" + std::to_string(l));
    for (std::size_t j = 0; j < decoder_[i].size(); ++j) {
      decoder_[i][j].collect(out, "dec" + std::to_string(l) + ".block" + std::to_string(j));
    }
  }
  head_.collect(out, "head");
  return out;
}

void DerainNet::zero_output_head() {
  for (auto& w : head_.weight.mutable_data()) w = 0.0;
  if (head_.bias) {
    for (auto& b : head_.bias->mutable_data()) b = 0.0;
  }
}

}  // namespace ddsa
