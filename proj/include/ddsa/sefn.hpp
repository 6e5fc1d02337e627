#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "ddsa/nn.hpp"
#include "ddsa/tensor.hpp"

namespace ddsa {

struct SefnOptions {
  double expansion = 2.66;
  bool use_multiscale = true;
  bool use_sa = true;
};

/// Hidden width of the feed-forward: expansion * c rounded up to a multiple
/// of 3 (the multi-scale split uses three channel groups).
std::int64_t sefn_hidden_channels(std::int64_t channels, double expansion);

/// Spatial-enhanced feed-forward network.
///
///   expand (1x1) -> gelu -> res2_multiscale -> spatial_attention -> project (1x1)
///
/// The multi-scale and spatial-attention stages are individually switchable;
/// with both off the block is a plain two-layer pointwise MLP.
struct SefnParams {
  Conv2dParams expand;                // 1x1, c -> m
  std::array<Conv2dParams, 2> res2;   // 3x3 depth-wise over groups 2 and 3 (m/3 channels each)
  Conv2dParams sa_conv;               // 7x7, 2 -> 1, padding 3
  Conv2dParams project;               // 1x1, m -> c
  SefnOptions options;

  std::int64_t hidden() const { return expand.out_channels(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

SefnParams make_sefn(std::int64_t channels, const SefnOptions& options, Rng& rng);

/// Hierarchical residual over three channel groups g1, g2, g3:
/// y1 = g1, y2 = dw(g2 + y1), y3 = dw(g3 + y2), output concat(y1, y2, y3).
Tensor res2_multiscale(const Tensor& x, const SefnParams& p);

/// x * sigmoid(conv7x7([channel_mean(x), channel_max(x)])), map broadcast over channels.
Tensor spatial_attention(const Tensor& x, const SefnParams& p);
/// The [b,1,h,w] gate used by spatial_attention.
Tensor spatial_attention_map(const Tensor& x, const SefnParams& p);

Tensor sefn_forward(const Tensor& x, const SefnParams& p);

}  // namespace ddsa
