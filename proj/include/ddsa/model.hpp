#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddsa/attention.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/sefn.hpp"
#include "ddsa/tensor.hpp"

namespace ddsa {

/// Architectural hyperparameters of the deraining network.
///
/// `depths` and `heads` hold one entry per encoder scale followed by the
/// bottleneck; decoder scales mirror the encoder entries. Channels double at
/// every scale starting from `base_channels`.
struct ModelConfig {
  std::int64_t base_channels = 12;
  int levels = 4;
  std::vector<int> depths{1, 1, 1, 1, 1};
  std::vector<int> heads{1, 1, 2, 2, 2};
  double k_ratio = 0.7;
  BranchWeights branch_weights{};
  bool learnable_branch_weights = false;
  bool use_dense = true;
  bool use_sparse = true;
  bool use_multiscale = true;
  bool use_sa = true;
  AttentionAxis attention_axis = AttentionAxis::spatial;
  MaskMode mask_mode = MaskMode::sentinel;
  double ffn_expansion = 2.66;

  static ModelConfig desk();
  static ModelConfig paper();
  /// Desk config switched to one of the ablation rows: 'a' dense-only,
  /// 'b' sparse-only, 'c' full, 'd' full attention without spatial attention.
  static ModelConfig ablation(char row);

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::int64_t channels_at(int level) const { return base_channels << level; }
  /// Input height and width must be multiples of this.
  std::int64_t spatial_multiple() const { return std::int64_t{1} << levels; }
  DdsaOptions ddsa_options(int heads_at_level) const;
  SefnOptions sefn_options() const;

  bool operator==(const ModelConfig&) const = default;
};

/// One dual attention Transformer block:
///   x' = x + DDSA(LN(x)),  out = x' + SEFN(LN(x'))
struct DatbBlock {
  LayerNormParams ln1;
  DdsaParams ddsa;
  LayerNormParams ln2;
  SefnParams sefn;

  void collect(ParamList& out, const std::string& prefix) const;
};

DatbBlock make_datb(std::int64_t channels, int heads, const ModelConfig& cfg, Rng& rng);
Tensor datb_forward(const Tensor& x, const DatbBlock& block);

/// Optional instrumentation for DerainNet::forward.
struct ForwardProbe {
  /// Replace the skip tensor of this encoder scale with zeros.
  std::optional<int> zero_skip_level;
  /// Filled per decoder scale (index = scale): fused input to its blocks.
  std::vector<Tensor> decoder_inputs;
};

/// U-shaped encoder-decoder of DATB blocks predicting a residual image.
class DerainNet {
 public:
  DerainNet(const ModelConfig& cfg, std::uint64_t seed);

  /// rainy + residual(rainy). Input [b,3,h,w] with h, w multiples of
  /// config().spatial_multiple().
  Tensor forward(const Tensor& rainy, ForwardProbe* probe = nullptr) const;
  /// Raw output of the 3-channel head.
  Tensor residual(const Tensor& rainy, ForwardProbe* probe = nullptr) const;

  /// Every trainable tensor with a stable, unique name, in a fixed order.
  ParamList parameters() const;
  const ModelConfig& config() const { return cfg_; }

  /// Zeros the final 3x3 conv so the network outputs its input exactly.
  void zero_output_head();

  const std::vector<DatbBlock>& encoder_blocks(int level) const { return encoder_[static_cast<std::size_t>(level)]; }
  const std::vector<DatbBlock>& decoder_blocks(int level) const { return decoder_[static_cast<std::size_t>(level)]; }
  const std::vector<DatbBlock>& bottleneck_blocks() const { return bottleneck_; }

 private:
  ModelConfig cfg_;
  Conv2dParams embed_;
  std::vector<std::vector<DatbBlock>> encoder_;
  std::vector<Conv2dParams> down_;
  std::vector<DatbBlock> bottleneck_;
  std::vector<Conv2dParams> up_;
  std::vector<Conv2dParams> fuse_;
  std::vector<std::vector<DatbBlock>> decoder_;
  Conv2dParams head_;
};

}  // namespace ddsa
