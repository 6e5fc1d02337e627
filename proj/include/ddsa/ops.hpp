#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ddsa/tensor.hpp"

namespace ddsa {

// Elementwise. Operands must have identical shapes; there is no implicit
// broadcasting (use expand() to repeat along a size-1 axis).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// a * s where s is a one-element tensor (differentiable in both).
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reductions over one axis; the axis is kept with size 1.
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
/// Gradient goes to the first maximal element.
Tensor max_axis(const Tensor& a, int axis);

// Layout.
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, int axis0, int axis1);
/// Repeats a size-1 axis `size` times; the backward sums over it.
Tensor expand(const Tensor& a, int axis, std::int64_t size);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
/// Splits `axis` into `parts` equal chunks.
std::vector<Tensor> split(const Tensor& a, int axis, int parts);
Tensor flip(const Tensor& a, int axis);

/// Matrix product over the last two axes. Leading axes must match exactly
/// (batched); both operands must have the same rank >= 2.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Scores with a per-entry keep flag. Dropped entries carry the attention
/// sentinel: softmax_rows gives them exactly zero probability. Unmasked
/// entries alias the values of `values`.
struct MaskedScores {
  Tensor values;
  std::vector<std::uint8_t> keep;  // one flag per element of `values`

  bool is_masked(std::int64_t flat_index) const {
    return keep[static_cast<std::size_t>(flat_index)] == 0;
  }
};

namespace detail {
/// out[i] = a[src[i]]; the backward scatters gradients back through `src`.
Tensor gather(const Tensor& a, Shape out_shape, std::vector<std::int64_t> src);
}  // namespace detail

/// Softmax over the last axis, with max subtraction.
Tensor softmax_rows(const Tensor& p);
/// Softmax over the last axis ignoring masked entries (they map to 0).
/// Throws if any row is fully masked.
Tensor softmax_rows(const MaskedScores& p);

}  // namespace ddsa
