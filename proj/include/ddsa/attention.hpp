#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddsa/nn.hpp"
#include "ddsa/ops.hpp"
#include "ddsa/tensor.hpp"

namespace ddsa {

/// Which axis forms the attention tokens. Spatial: one token per pixel,
/// n = h*w, features = channels per head. Channel: one token per channel of
/// a head, features = pixels (transposed attention).
enum class AttentionAxis { spatial, channel };

/// How top-k dropped scores enter the sparse softmax. Sentinel: excluded
/// (probability exactly 0). LiteralZero: the score is replaced by 0 and
/// still takes part in the softmax.
enum class MaskMode { sentinel, literal_zero };

struct BranchWeights {
  double dense = 0.5;
  double sparse = 0.5;

  bool operator==(const BranchWeights&) const = default;
};

struct DdsaOptions {
  int heads = 1;
  double k_ratio = 0.7;
  BranchWeights weights{};
  bool learnable_weights = false;
  AttentionAxis axis = AttentionAxis::spatial;
  MaskMode mask_mode = MaskMode::sentinel;
};

struct DdsaParams {
  Conv2dParams qkv_point;  // 1x1, c -> 3c
  Conv2dParams qkv_depth;  // 3x3 depth-wise, groups = 3c
  Conv2dParams out_proj;   // 1x1, c -> c
  DdsaOptions options;
  /// Raw learnable branch weights [2]; the effective weights are
  /// softplus(raw), which keeps them non-negative.
  std::optional<Tensor> raw_weights;

  std::int64_t channels() const { return out_proj.out_channels(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

DdsaParams make_ddsa(std::int64_t channels, const DdsaOptions& options, Rng& rng);

struct QKV {
  Tensor q, k, v;
};

/// Pointwise then depth-wise conv, split into Q, K, V and arranged per head.
/// Spatial axis: each is [b, heads, h*w, c/heads].
/// Channel axis: each is [b, heads, c/heads, h*w].
QKV project_qkv(const Tensor& x, const DdsaParams& p);

/// Q K^T / sqrt(d) over the last two axes, d = feature (last) dimension.
Tensor scaled_scores(const Tensor& q, const Tensor& k);

/// max(1, ceil(k_ratio * n)), with ceil tolerant to representation error
/// in k_ratio * n.
std::int64_t topk_count(std::int64_t n, double k_ratio);

/// Keeps, in every row, the entries >= the row's k-th largest value
/// (all ties at the threshold are kept); the rest become the sentinel.
MaskedScores topk_mask(const Tensor& p, double k_ratio);

/// Both branch scores of one attention call.
struct AttentionScores {
  Tensor p;
  MaskedScores masked;
};

AttentionScores attention_scores(const Tensor& q, const Tensor& k, double k_ratio);

/// softmax(P) V.
Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v);
/// softmax(M(P, k)) V.
Tensor sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v, double k_ratio,
                        MaskMode mode = MaskMode::sentinel);
/// (w_dense softmax(P) + w_sparse softmax(M(P, k))) V. A branch with a
/// fixed weight of exactly zero is skipped. `learnable` overrides `weights`
/// when given: a [2] tensor of non-negative weights.
Tensor dual_attention(const Tensor& q, const Tensor& k, const Tensor& v, double k_ratio,
                      BranchWeights weights, MaskMode mode = MaskMode::sentinel,
                      const Tensor* learnable = nullptr);

/// Full DDSA layer: projection, dual attention, head merge, output projection.
Tensor ddsa_forward(const Tensor& x, const DdsaParams& p);

/// Records top-k masks while active and, after start_replay(), hands them
/// back in the same order instead of recomputing. Used by finite-difference
/// checks so that a perturbation cannot move an entry across the threshold.
class TopkMaskFreeze {
 public:
  TopkMaskFreeze();
  ~TopkMaskFreeze();
  TopkMaskFreeze(const TopkMaskFreeze&) = delete;
  TopkMaskFreeze& operator=(const TopkMaskFreeze&) = delete;

  void start_replay() {
    replay_ = true;
    cursor_ = 0;
  }
  std::size_t recorded() const { return masks_.size(); }

  /// Internal hook used by topk_mask.
  std::vector<std::uint8_t> next(const Tensor& p, double k_ratio);

 private:
  std::vector<std::vector<std::uint8_t>> masks_;
  std::size_t cursor_ = 0;
  bool replay_ = false;
  TopkMaskFreeze* previous_;
};

}  // namespace ddsa
