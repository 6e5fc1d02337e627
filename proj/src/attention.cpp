#include "ddsa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace ddsa {

namespace {

thread_local TopkMaskFreeze* g_mask_freeze = nullptr;

std::vector<std::uint8_t> compute_topk_keep(const Tensor& p, double k_ratio) {
  const std::int64_t n = p.dim(-1);
  const std::int64_t rows = p.numel() / n;
  const std::int64_t k = topk_count(n, k_ratio);
  const auto x = p.data();
  std::vector<std::uint8_t> keep(x.size(), 0);
  std::vector<double> row(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto first = x.begin() + r * n;
    std::copy(first, first + n, row.begin());
    if (std::any_of(row.begin(), row.end(), [](double v) { return std::isnan(v); })) {
      // let NaN reach the loss
      std::fill(keep.begin() + r * n, keep.begin() + (r + 1) * n, 1);
      continue;
    }
    std::nth_element(row.begin(), row.begin() + (k - 1), row.end(), std::greater<>());
    const double threshold = row[static_cast<std::size_t>(k - 1)];
    for (std::int64_t c = 0; c < n; ++c) {
      keep[static_cast<std::size_t>(r * n + c)] = first[c] >= threshold ? 1 : 0;
    }
  }
  return keep;
}

// softplus(raw), elementwise
Tensor softplus(const Tensor& raw) { return log(add_scalar(exp(raw), 1.0)); }

}  // namespace

TopkMaskFreeze::TopkMaskFreeze() : previous_(g_mask_freeze) { g_mask_freeze = this; }
TopkMaskFreeze::~TopkMaskFreeze() { g_mask_freeze = previous_; }

std::vector<std::uint8_t> TopkMaskFreeze::next(const Tensor& p, double k_ratio) {
  if (!replay_) {
    masks_.push_back(compute_topk_keep(p, k_ratio));
    return masks_.back();
  }
  if (cursor_ >= masks_.size() ||
      masks_[cursor_].size() != static_cast<std::size_t>(p.numel())) {
    throw std::logic_error("TopkMaskFreeze: replay does not follow the recorded call sequence");
  }
  return masks_[cursor_++];
}

void DdsaParams::collect(ParamList& out, const std::string& prefix) const {
  qkv_point.collect(out, prefix + ".qkv_point");
  qkv_depth.collect(out, prefix + ".qkv_depth");
  out_proj.collect(out, prefix + ".out_proj");
  if (raw_weights) out.push_back({prefix + ".branch_weights", *raw_weights});
}

DdsaParams make_ddsa(std::int64_t channels, const DdsaOptions& options, Rng& rng) {
  if (options.heads <= 0 || channels % options.heads != 0) {
    throw ConfigError("ddsa: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(options.heads));
  }
  if (!(options.k_ratio > 0.0 && options.k_ratio <= 1.0)) {
    throw ConfigError("ddsa: k_ratio must be in (0, 1], got " + std::to_string(options.k_ratio));
  }
  if (options.weights.dense < 0.0 || options.weights.sparse < 0.0) {
    throw ConfigError("ddsa: branch weights must be non-negative");
  }
  DdsaParams p;
  p.options = options;
  p.qkv_point = make_conv(channels, 3 * channels, 1, 1, true, rng);
  p.qkv_depth = make_conv(3 * channels, 3 * channels, 3, static_cast<int>(3 * channels), true, rng);
  p.out_proj = make_conv(channels, channels, 1, 1, true, rng);
  if (options.learnable_weights) {
    // softplus^-1(w) so the initial effective weights equal options.weights
    auto inv_softplus = [](double w) { return w > 30.0 ? w : std::log(std::expm1(std::max(w, 1e-6))); };
    Tensor raw(Shape{2}, {inv_softplus(options.weights.dense), inv_softplus(options.weights.sparse)});
    raw.set_requires_grad();
    p.raw_weights = raw;
  }
  return p;
}

QKV project_qkv(const Tensor& x, const DdsaParams& p) {
  if (x.rank() != 4) throw ShapeError("project_qkv expects [b,c,h,w], got " + shape_str(x.shape()));
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int heads = p.options.heads;
  if (heads <= 0 || c % heads != 0) {
    throw ConfigError("project_qkv: channels " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (p.qkv_point.in_channels() != c) {
    throw ConfigError("project_qkv: layer built for " + std::to_string(p.qkv_point.in_channels()) +
                      " channels, input has " + std::to_string(c));
  }
  const Tensor qkv = conv2d(conv2d(x, p.qkv_point), p.qkv_depth);
  auto parts = split(qkv, 1, 3);
  const std::int64_t d = c / heads, n = h * w;
  QKV out;
  Tensor* dst[3] = {&out.q, &out.k, &out.v};
  for (int i = 0; i < 3; ++i) {
    Tensor per_head = reshape(parts[static_cast<std::size_t>(i)], Shape{b, heads, d, n});
    *dst[i] = p.options.axis == AttentionAxis::spatial ? transpose(per_head, -1, -2) : per_head;
  }
  return out;
}

Tensor scaled_scores(const Tensor& q, const Tensor& k) {
  if (q.rank() != k.rank() || q.dim(-1) != k.dim(-1)) {
    throw ShapeError("scaled_scores: feature dimension mismatch " + shape_str(q.shape()) + " vs " +
                     shape_str(k.shape()));
  }
  const double d = static_cast<double>(q.dim(-1));
  return scale(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(d));
}

std::int64_t topk_count(std::int64_t n, double k_ratio) {
  const double raw = k_ratio * static_cast<double>(n);
  const auto k = static_cast<std::int64_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::int64_t>(k, 1, n);
}

MaskedScores topk_mask(const Tensor& p, double k_ratio) {
  if (!(k_ratio > 0.0 && k_ratio <= 1.0)) {
    throw ConfigError("topk_mask: k_ratio must be in (0, 1]");
  }
  MaskedScores m{p, {}};
  m.keep = g_mask_freeze ? g_mask_freeze->next(p, k_ratio) : compute_topk_keep(p, k_ratio);
  return m;
}

AttentionScores attention_scores(const Tensor& q, const Tensor& k, double k_ratio) {
  Tensor p = scaled_scores(q, k);
  MaskedScores masked = topk_mask(p, k_ratio);
  return {p, std::move(masked)};
}

namespace {

Tensor sparse_probs(const MaskedScores& masked, MaskMode mode) {
  if (mode == MaskMode::sentinel) return softmax_rows(masked);
  Tensor keep(masked.values.shape());
  auto kd = keep.mutable_data();
  for (std::size_t i = 0; i < kd.size(); ++i) kd[i] = masked.keep[i] ? 1.0 : 0.0;
  return softmax_rows(mul(masked.values, keep));
}

}  // namespace

Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return matmul(softmax_rows(scaled_scores(q, k)), v);
}

Tensor sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v, double k_ratio,
                        MaskMode mode) {
  return matmul(sparse_probs(topk_mask(scaled_scores(q, k), k_ratio), mode), v);
}

Tensor dual_attention(const Tensor& q, const Tensor& k, const Tensor& v, double k_ratio,
                      BranchWeights weights, MaskMode mode, const Tensor* learnable) {
  const Tensor p = scaled_scores(q, k);
  if (learnable) {
    const Tensor wd = slice(*learnable, 0, 0, 1);
    const Tensor ws = slice(*learnable, 0, 1, 1);
    const Tensor probs = add(scale_by(softmax_rows(p), wd),
                             scale_by(sparse_probs(topk_mask(p, k_ratio), mode), ws));
    return matmul(probs, v);
  }
  std::optional<Tensor> probs;
  if (weights.dense != 0.0) probs = scale(softmax_rows(p), weights.dense);
  if (weights.sparse != 0.0) {
    Tensor s = scale(sparse_probs(topk_mask(p, k_ratio), mode), weights.sparse);
    probs = probs ? add(*probs, s) : s;
  }
  if (!probs) throw ConfigError("dual_attention: both branch weights are zero");
  return matmul(*probs, v);
}

Tensor ddsa_forward(const Tensor& x, const DdsaParams& p) {
  const QKV qkv = project_qkv(x, p);
  std::optional<Tensor> weights;
  if (p.raw_weights) weights = softplus(*p.raw_weights);
  Tensor att = dual_attention(qkv.q, qkv.k, qkv.v, p.options.k_ratio, p.options.weights,
                              p.options.mask_mode, weights ? &*weights : nullptr);
  if (p.options.axis == AttentionAxis::spatial) att = transpose(att, -1, -2);
  return conv2d(reshape(att, x.shape()), p.out_proj);
}

}  // namespace ddsa
