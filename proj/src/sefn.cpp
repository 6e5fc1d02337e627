#include "ddsa/sefn.hpp"

#include <cmath>

#include "ddsa/ops.hpp"

namespace ddsa {

std::int64_t sefn_hidden_channels(std::int64_t channels, double expansion) {
  const auto groups = static_cast<std::int64_t>(std::ceil(expansion * static_cast<double>(channels) / 3.0 - 1e-9));
  return 3 * std::max<std::int64_t>(groups, 1);
}

void SefnParams::collect(ParamList& out, const std::string& prefix) const {
  expand.collect(out, prefix + ".expand");
  if (options.use_multiscale) {
    res2[0].collect(out, prefix + ".res2_1");
    res2[1].collect(out, prefix + ".res2_2");
  }
  if (options.use_sa) sa_conv.collect(out, prefix + ".sa_conv");
  project.collect(out, prefix + ".project");
}

SefnParams make_sefn(std::int64_t channels, const SefnOptions& options, Rng& rng) {
  const std::int64_t m = sefn_hidden_channels(channels, options.expansion);
  const std::int64_t g = m / 3;
  SefnParams p;
  p.options = options;
  p.expand = make_conv(channels, m, 1, 1, true, rng);
  p.res2[0] = make_conv(g, g, 3, static_cast<int>(g), true, rng);
  p.res2[1] = make_conv(g, g, 3, static_cast<int>(g), true, rng);
  p.sa_conv = make_conv(2, 1, 7, 1, true, rng);
  p.project = make_conv(m, channels, 1, 1, true, rng);
  return p;
}

Tensor res2_multiscale(const Tensor& x, const SefnParams& p) {
  if (x.rank() != 4 || x.dim(1) % 3 != 0) {
    throw ConfigError("res2_multiscale: channel count of " + shape_str(x.shape()) +
                      " is not divisible by 3");
  }
  auto g = split(x, 1, 3);
  const Tensor& y1 = g[0];
  Tensor y2 = conv2d(add(g[1], y1), p.res2[0]);
  Tensor y3 = conv2d(add(g[2], y2), p.res2[1]);
  return concat({y1, y2, y3}, 1);
}

Tensor spatial_attention_map(const Tensor& x, const SefnParams& p) {
  const Tensor pooled = concat({channel_mean(x), channel_max(x)}, 1);
  return sigmoid(conv2d(pooled, p.sa_conv));
}

Tensor spatial_attention(const Tensor& x, const SefnParams& p) {
  return mul(x, expand(spatial_attention_map(x, p), 1, x.dim(1)));
}

Tensor sefn_forward(const Tensor& x, const SefnParams& p) {
  Tensor h = gelu(conv2d(x, p.expand));
  if (p.options.use_multiscale) h = res2_multiscale(h, p);
  if (p.options.use_sa) h = spatial_attention(h, p);
  return conv2d(h, p.project);
}

}  // namespace ddsa
