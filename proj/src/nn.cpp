#include "ddsa/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ddsa/ops.hpp"

namespace ddsa {

using detail::gather;
using detail::grad_buffer;
using detail::make_result;
using detail::TensorImpl;

double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

void Conv2dParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias) out.push_back({prefix + ".bias", *bias});
}

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

namespace {

void check_groups(std::int64_t in_c, std::int64_t out_c, int groups) {
  if (groups <= 0 || in_c % groups != 0 || out_c % groups != 0) {
    throw ConfigError("conv groups " + std::to_string(groups) + " must divide in_c " +
                      std::to_string(in_c) + " and out_c " + std::to_string(out_c));
  }
}

}  // namespace

Conv2dParams make_conv(std::int64_t in_c, std::int64_t out_c, int kernel, int groups, bool bias,
                       Rng& rng) {
  check_groups(in_c, out_c, groups);
  const std::int64_t fan_in = (in_c / groups) * kernel * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Conv2dParams p;
  p.weight = Tensor(Shape{out_c, in_c / groups, kernel, kernel});
  for (auto& w : p.weight.mutable_data()) w = uniform(rng, -bound, bound);
  p.weight.set_requires_grad();
  if (bias) {
    Tensor b(Shape{out_c});
    for (auto& v : b.mutable_data()) v = uniform(rng, -bound, bound);
    b.set_requires_grad();
    p.bias = b;
  }
  p.padding = kernel / 2;
  p.groups = groups;
  return p;
}

Conv2dParams make_zero_conv(std::int64_t in_c, std::int64_t out_c, int kernel, int groups,
                            bool bias) {
  check_groups(in_c, out_c, groups);
  Conv2dParams p;
  p.weight = Tensor(Shape{out_c, in_c / groups, kernel, kernel});
  p.weight.set_requires_grad();
  if (bias) {
    p.bias = Tensor(Shape{out_c});
    p.bias->set_requires_grad();
  }
  p.padding = kernel / 2;
  p.groups = groups;
  return p;
}

Conv2dParams make_identity_conv(std::int64_t channels, bool bias) {
  Conv2dParams p = make_zero_conv(channels, channels, 1, 1, bias);
  auto w = p.weight.mutable_data();
  for (std::int64_t c = 0; c < channels; ++c) w[static_cast<std::size_t>(c * channels + c)] = 1.0;
  return p;
}

namespace {

struct ConvGeometry {
  std::int64_t batch, in_c, h, w;
  std::int64_t out_c, kh, kw, out_h, out_w;
  std::int64_t in_per_group, out_per_group;
  int stride, pad;

  // Valid output range [lo, hi) along one axis for kernel offset k.
  static void valid_range(std::int64_t k, std::int64_t in_len, std::int64_t out_len, int stride,
                          int pad, std::int64_t& lo, std::int64_t& hi) {
    lo = 0;
    while (lo < out_len && lo * stride - pad + k < 0) ++lo;
    hi = out_len;
    while (hi > lo && (hi - 1) * stride - pad + k >= in_len) --hi;
  }
};

ConvGeometry conv_geometry(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects [b,c,h,w], got " + shape_str(x.shape()));
  if (p.weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.out_c = p.weight.dim(0);
  g.kh = p.weight.dim(2);
  g.kw = p.weight.dim(3);
  g.stride = p.stride;
  g.pad = p.padding;
  if (p.groups <= 0 || g.out_c % p.groups != 0) {
    throw ConfigError("conv2d: groups " + std::to_string(p.groups) + " do not divide " +
                      std::to_string(g.out_c) + " output channels");
  }
  if (p.weight.dim(1) * p.groups != g.in_c) {
    throw ShapeError("conv2d: input channels " + std::to_string(g.in_c) +
                      " inconsistent with weight " + shape_str(p.weight.shape()) + " and groups " +
                      std::to_string(p.groups));
  }
  if (p.bias && p.bias->numel() != g.out_c) throw ConfigError("conv2d: bias length mismatch");
  if (p.stride <= 0 || p.padding < 0) throw ConfigError("conv2d: invalid stride/padding");
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  g.out_h = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.out_w = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  g.in_per_group = g.in_c / p.groups;
  g.out_per_group = g.out_c / p.groups;
  return g;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  const ConvGeometry g = conv_geometry(x, p);
  const auto xd = x.data();
  const auto wd = p.weight.data();
  const std::int64_t plane_out = g.out_h * g.out_w;
  std::vector<double> out(static_cast<std::size_t>(g.batch * g.out_c * plane_out), 0.0);

  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t oc = 0; oc < g.out_c; ++oc) {
      double* o = out.data() + (b * g.out_c + oc) * plane_out;
      const std::int64_t group = oc / g.out_per_group;
      for (std::int64_t ci = 0; ci < g.in_per_group; ++ci) {
        const std::int64_t cin = group * g.in_per_group + ci;
        const double* xp = xd.data() + (b * g.in_c + cin) * g.h * g.w;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          std::int64_t oy0, oy1;
          ConvGeometry::valid_range(ky, g.h, g.out_h, g.stride, g.pad, oy0, oy1);
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            std::int64_t ox0, ox1;
            ConvGeometry::valid_range(kx, g.w, g.out_w, g.stride, g.pad, ox0, ox1);
            const double wv = wd[static_cast<std::size_t>(((oc * g.in_per_group + ci) * g.kh + ky) * g.kw + kx)];
            for (std::int64_t oy = oy0; oy < oy1; ++oy) {
              const double* xrow = xp + (oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
              double* orow = o + oy * g.out_w;
              for (std::int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xrow[ox * g.stride];
            }
          }
        }
      }
      if (p.bias) {
        const double bv = p.bias->data()[static_cast<std::size_t>(oc)];
        for (std::int64_t i = 0; i < plane_out; ++i) o[i] += bv;
      }
    }
  }

  std::vector<Tensor> inputs{x, p.weight};
  if (p.bias) inputs.push_back(*p.bias);
  const Tensor weight = p.weight;
  const std::optional<Tensor> bias = p.bias;
  return make_result(
      Shape{g.batch, g.out_c, g.out_h, g.out_w}, std::move(out), inputs,
      [x, weight, bias, g](const TensorImpl& og) {
        const auto xd = x.data();
        const auto wd = weight.data();
        auto gx = grad_buffer(x);
        auto gw = grad_buffer(weight);
        auto gb = bias ? grad_buffer(*bias) : std::span<double>{};
        const std::int64_t plane_out = g.out_h * g.out_w;
        for (std::int64_t b = 0; b < g.batch; ++b) {
          for (std::int64_t oc = 0; oc < g.out_c; ++oc) {
            const double* go = og.grad.data() + (b * g.out_c + oc) * plane_out;
            if (!gb.empty()) {
              double acc = 0.0;
              for (std::int64_t i = 0; i < plane_out; ++i) acc += go[i];
              gb[static_cast<std::size_t>(oc)] += acc;
            }
            const std::int64_t group = oc / g.out_per_group;
            for (std::int64_t ci = 0; ci < g.in_per_group; ++ci) {
              const std::int64_t cin = group * g.in_per_group + ci;
              const std::int64_t xoff = (b * g.in_c + cin) * g.h * g.w;
              for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                std::int64_t oy0, oy1;
                ConvGeometry::valid_range(ky, g.h, g.out_h, g.stride, g.pad, oy0, oy1);
                for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                  std::int64_t ox0, ox1;
                  ConvGeometry::valid_range(kx, g.w, g.out_w, g.stride, g.pad, ox0, ox1);
                  const std::size_t widx = static_cast<std::size_t>(
                      ((oc * g.in_per_group + ci) * g.kh + ky) * g.kw + kx);
                  const double wv = wd[widx];
                  double wacc = 0.0;
                  for (std::int64_t oy = oy0; oy < oy1; ++oy) {
                    const std::int64_t row = xoff + (oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
                    const double* grow = go + oy * g.out_w;
                    if (!gw.empty()) {
                      const double* xrow = xd.data() + row;
                      for (std::int64_t ox = ox0; ox < ox1; ++ox) wacc += grow[ox] * xrow[ox * g.stride];
                    }
                    if (!gx.empty()) {
                      double* gxrow = gx.data() + row;
                      for (std::int64_t ox = ox0; ox < ox1; ++ox) gxrow[ox * g.stride] += wv * grow[ox];
                    }
                  }
                  if (!gw.empty()) gw[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

LayerNormParams make_layer_norm(std::int64_t channels) {
  LayerNormParams p{Tensor::ones(Shape{channels}), Tensor::zeros(Shape{channels}), 1e-5};
  p.gamma.set_requires_grad();
  p.beta.set_requires_grad();
  return p;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  if (x.rank() != 4) throw ShapeError("layer_norm expects [b,c,h,w], got " + shape_str(x.shape()));
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (p.gamma.numel() != c || p.beta.numel() != c) {
    throw ShapeError("layer_norm: " + std::to_string(c) + " channels but gamma/beta of length " +
                     std::to_string(p.gamma.numel()));
  }
  const auto xd = x.data();
  const auto gam = p.gamma.data();
  const auto bet = p.beta.data();
  std::vector<double> out(xd.size());
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(static_cast<std::size_t>(b * hw));
  const double n = static_cast<double>(c);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t s = 0; s < hw; ++s) {
      const std::int64_t base = bi * c * hw + s;
      double mu = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) mu += xd[static_cast<std::size_t>(base + ch * hw)];
      mu /= n;
      double var = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double d = xd[static_cast<std::size_t>(base + ch * hw)] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + p.epsilon);
      inv_std[static_cast<std::size_t>(bi * hw + s)] = is;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto idx = static_cast<std::size_t>(base + ch * hw);
        xhat[idx] = (xd[idx] - mu) * is;
        out[idx] = xhat[idx] * gam[static_cast<std::size_t>(ch)] + bet[static_cast<std::size_t>(ch)];
      }
    }
  }
  const Tensor gamma = p.gamma;
  const Tensor beta = p.beta;
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), b, c,
       hw](const TensorImpl& og) {
        auto gx = grad_buffer(x);
        auto gg = grad_buffer(gamma);
        auto gbeta = grad_buffer(beta);
        const auto gam = gamma.data();
        const double n = static_cast<double>(c);
        for (std::int64_t bi = 0; bi < b; ++bi) {
          for (std::int64_t s = 0; s < hw; ++s) {
            const std::int64_t base = bi * c * hw + s;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const auto idx = static_cast<std::size_t>(base + ch * hw);
              const double go = og.grad[idx];
              if (!gg.empty()) gg[static_cast<std::size_t>(ch)] += go * xhat[idx];
              if (!gbeta.empty()) gbeta[static_cast<std::size_t>(ch)] += go;
              const double dxh = go * gam[static_cast<std::size_t>(ch)];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[idx];
            }
            if (gx.empty()) continue;
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            const double is = inv_std[static_cast<std::size_t>(bi * hw + s)];
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const auto idx = static_cast<std::size_t>(base + ch * hw);
              const double dxh = og.grad[idx] * gam[static_cast<std::size_t>(ch)];
              gx[idx] += is * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
            }
          }
        }
      });
}

Tensor pixel_unshuffle(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("pixel_unshuffle expects [b,c,h,w]");
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t r = factor;
  if (h % r != 0 || w % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(r));
  }
  const std::int64_t oh = h / r, ow = w / r, oc = c * r * r;
  std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
  std::size_t i = 0;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < oc; ++ch) {
      const std::int64_t cin = ch / (r * r), dy = (ch % (r * r)) / r, dx = ch % r;
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx)
          src[i++] = ((bi * c + cin) * h + y * r + dy) * w + xx * r + dx;
    }
  return gather(x, Shape{b, oc, oh, ow}, std::move(src));
}

Tensor pixel_shuffle(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle expects [b,c,h,w]");
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t r = factor;
  if (c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(r * r));
  }
  const std::int64_t oc = c / (r * r), oh = h * r, ow = w * r;
  std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
  std::size_t i = 0;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < oc; ++ch)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          const std::int64_t cin = ch * r * r + (y % r) * r + (xx % r);
          src[i++] = ((bi * c + cin) * h + y / r) * w + xx / r;
        }
  return gather(x, Shape{b, oc, oh, ow}, std::move(src));
}

Tensor channel_mean(const Tensor& x) { return mean_axis(x, 1); }
Tensor channel_max(const Tensor& x) { return max_axis(x, 1); }

Tensor downsample(const Tensor& x, const Conv2dParams& proj) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("downsample needs even spatial dims, got " + shape_str(x.shape()));
  }
  return conv2d(pixel_unshuffle(x, 2), proj);
}

Tensor upsample(const Tensor& x, const Conv2dParams& proj) {
  return pixel_shuffle(conv2d(x, proj), 2);
}

namespace {

std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor reflect_pad(const Tensor& x, std::int64_t pad_bottom, std::int64_t pad_right) {
  if (x.rank() != 4) throw ShapeError("reflect_pad expects [b,c,h,w]");
  const std::int64_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h + pad_bottom, ow = w + pad_right;
  const auto xd = x.data();
  std::vector<double> out(static_cast<std::size_t>(bc * oh * ow));
  for (std::int64_t p = 0; p < bc; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        out[static_cast<std::size_t>((p * oh + y) * ow + xx)] =
            xd[static_cast<std::size_t>((p * h + mirror_index(y, h)) * w + mirror_index(xx, w))];
  return Tensor(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out));
}

Tensor crop(const Tensor& x, std::int64_t height, std::int64_t width) {
  if (x.rank() != 4 || height > x.dim(2) || width > x.dim(3)) {
    throw ShapeError("crop: cannot crop " + shape_str(x.shape()) + " to " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  return slice(slice(x, 2, 0, height), 3, 0, width);
}

}  // namespace ddsa
