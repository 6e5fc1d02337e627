#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ddsa/tensor.hpp"

namespace ddsa {

using Rng = std::mt19937_64;

/// Uniform double in [lo, hi) built from raw engine bits, so the stream is
/// identical across standard library implementations.
double uniform(Rng& rng, double lo, double hi);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

struct Conv2dParams {
  Tensor weight;  // [out_c, in_c / groups, kh, kw]
  std::optional<Tensor> bias;  // [out_c]
  int stride = 1;
  int padding = 0;
  int groups = 1;

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t in_channels() const { return weight.dim(1) * groups; }
  std::int64_t kernel_h() const { return weight.dim(2); }
  std::int64_t kernel_w() const { return weight.dim(3); }
  bool depthwise() const { return groups == in_channels() && groups == out_channels(); }

  void collect(ParamList& out, const std::string& prefix) const;
};

/// Fan-in uniform init: weights and bias in U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
/// Padding defaults to "same" for odd kernels.
Conv2dParams make_conv(std::int64_t in_c, std::int64_t out_c, int kernel, int groups, bool bias,
                       Rng& rng);

/// Conv whose weight and bias are all zero.
Conv2dParams make_zero_conv(std::int64_t in_c, std::int64_t out_c, int kernel, int groups,
                            bool bias);

/// 1x1 conv mapping channel i to channel i (requires in_c == out_c).
Conv2dParams make_identity_conv(std::int64_t channels, bool bias);

/// Direct convolution with zero padding. Each output element accumulates
/// over (in_channel, ky, kx) in that order, then adds the bias.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

struct LayerNormParams {
  Tensor gamma;  // [channels]
  Tensor beta;   // [channels]
  double epsilon = 1e-5;

  std::int64_t channels() const { return gamma.numel(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

LayerNormParams make_layer_norm(std::int64_t channels);

/// Normalizes every pixel of x[b,c,h,w] over its c channels.
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

/// Space-to-depth: [b,c,h,w] -> [b,c*r*r,h/r,w/r], channel index c*r*r + dy*r + dx.
Tensor pixel_unshuffle(const Tensor& x, int factor = 2);
/// Depth-to-space inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& x, int factor = 2);

/// [b,c,h,w] -> [b,1,h,w]
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);

/// pixel_unshuffle then 1x1 conv (4c -> c_out). Throws on odd h or w.
Tensor downsample(const Tensor& x, const Conv2dParams& proj);
/// 1x1 conv (c -> 4 c_out) then pixel_shuffle.
Tensor upsample(const Tensor& x, const Conv2dParams& proj);

/// Reflect padding (no edge repeat) on the bottom and right of x[b,c,h,w].
/// Inference-only helper; not differentiable.
Tensor reflect_pad(const Tensor& x, std::int64_t pad_bottom, std::int64_t pad_right);
/// Top-left crop of x[b,c,h,w] to [b,c,h,w'].
Tensor crop(const Tensor& x, std::int64_t height, std::int64_t width);

}  // namespace ddsa
