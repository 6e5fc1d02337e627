#include "ddsa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

namespace ddsa {

using detail::accumulate;
using detail::gather;
using detail::grad_buffer;
using detail::make_result;
using detail::TensorImpl;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

int normalize_axis(const Tensor& a, int axis) {
  const int r = a.rank();
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  }
  return ax;
}

// Shape seen as [outer, n, inner] around `axis`.
struct AxisView {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <typename Fn, typename DFn>
Tensor unary(const Tensor& a, Fn f, DFn df_from_x_y) {
  std::vector<double> out(a.data().size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [a, df_from_x_y](const TensorImpl& o) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    const auto x = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * df_from_x_y(x[i], o.data[i]);
  });
}

}  // namespace

Tensor detail::gather(const Tensor& a, Shape out_shape, std::vector<std::int64_t> src) {
  std::vector<double> out(src.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[static_cast<std::size_t>(src[i])];
  return make_result(std::move(out_shape), std::move(out), {a},
                     [a, src = std::move(src)](const TensorImpl& o) {
                       auto ga = grad_buffer(a);
                       if (ga.empty()) return;
                       for (std::size_t i = 0; i < src.size(); ++i) {
                         ga[static_cast<std::size_t>(src[i])] += o.grad[i];
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    accumulate(a, o.grad);
    accumulate(b, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    accumulate(a, o.grad);
    auto gb = grad_buffer(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    const auto x = a.data();
    const auto y = b.data();
    auto ga = grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * y[i];
    auto gb = grad_buffer(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: factor must have one element");
  const double f = s.item();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= f;
  return make_result(a.shape(), std::move(out), {a, s}, [a, s](const TensorImpl& o) {
    const double f = s.item();
    auto ga = grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * f;
    auto gs = grad_buffer(s);
    if (!gs.empty()) {
      const auto x = a.data();
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += o.grad[i] * x[i];
      gs[0] += acc;
    }
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result(Shape{1}, {acc}, {a}, [a](const TensorImpl& o) {
    auto ga = grad_buffer(a);
    for (auto& g : ga) g += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
  const int ax = normalize_axis(a, axis);
  const auto v = axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = 1;
  std::vector<double> out(static_cast<std::size_t>(v.outer * v.inner), 0.0);
  const auto x = a.data();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t k = 0; k < v.n; ++k)
      for (std::int64_t i = 0; i < v.inner; ++i)
        out[static_cast<std::size_t>(o * v.inner + i)] +=
            x[static_cast<std::size_t>((o * v.n + k) * v.inner + i)];
  return make_result(std::move(out_shape), std::move(out), {a}, [a, v](const TensorImpl& og) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t k = 0; k < v.n; ++k)
        for (std::int64_t i = 0; i < v.inner; ++i)
          ga[static_cast<std::size_t>((o * v.n + k) * v.inner + i)] +=
              og.grad[static_cast<std::size_t>(o * v.inner + i)];
  });
}

Tensor mean_axis(const Tensor& a, int axis) {
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor max_axis(const Tensor& a, int axis) {
  const int ax = normalize_axis(a, axis);
  const auto v = axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = 1;
  std::vector<std::int64_t> src(static_cast<std::size_t>(v.outer * v.inner));
  const auto x = a.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      std::int64_t best = o * v.n * v.inner + i;
      for (std::int64_t k = 1; k < v.n; ++k) {
        const std::int64_t idx = (o * v.n + k) * v.inner + i;
        if (x[static_cast<std::size_t>(idx)] > x[static_cast<std::size_t>(best)]) best = idx;
      }
      src[static_cast<std::size_t>(o * v.inner + i)] = best;
    }
  }
  return gather(a, std::move(out_shape), std::move(src));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [a](const TensorImpl& o) { accumulate(a, o.grad); });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const int a0 = normalize_axis(a, axis0);
  const int a1 = normalize_axis(a, axis1);
  const auto& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  Shape out_shape = in_shape;
  std::swap(out_shape[static_cast<std::size_t>(a0)], out_shape[static_cast<std::size_t>(a1)]);

  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<std::int64_t> strides = in_strides;  // input stride for each output axis
  std::swap(strides[static_cast<std::size_t>(a0)], strides[static_cast<std::size_t>(a1)]);

  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<std::int64_t> src(n);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    src[flat] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return gather(a, std::move(out_shape), std::move(src));
}

Tensor expand(const Tensor& a, int axis, std::int64_t size) {
  const int ax = normalize_axis(a, axis);
  if (a.dim(ax) != 1) throw ShapeError("expand: axis must have size 1 in " + shape_str(a.shape()));
  const auto v = axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = size;
  std::vector<std::int64_t> src(static_cast<std::size_t>(v.outer * size * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t k = 0; k < size; ++k)
      for (std::int64_t i = 0; i < v.inner; ++i)
        src[static_cast<std::size_t>((o * size + k) * v.inner + i)] = o * v.inner + i;
  return gather(a, std::move(out_shape), std::move(src));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int ax = normalize_axis(parts[0], axis);
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    total += s[static_cast<std::size_t>(ax)];
    s[static_cast<std::size_t>(ax)] = out_shape[static_cast<std::size_t>(ax)];
    if (s != out_shape) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    }
  }
  out_shape[static_cast<std::size_t>(ax)] = total;
  const auto v = axis_view(out_shape, ax);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t n = p.dim(ax);
    const auto x = p.data();
    for (std::int64_t o = 0; o < v.outer; ++o)
      std::copy_n(x.begin() + o * n * v.inner, n * v.inner,
                  out.begin() + (o * total + off) * v.inner);
    off += n;
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [parts, offsets, v, total](const TensorImpl& og) {
                       for (std::size_t j = 0; j < parts.size(); ++j) {
                         auto g = grad_buffer(parts[j]);
                         if (g.empty()) continue;
                         const std::int64_t n = static_cast<std::int64_t>(g.size()) /
                                                (v.outer * v.inner);
                         for (std::int64_t o = 0; o < v.outer; ++o)
                           for (std::int64_t t = 0; t < n * v.inner; ++t)
                             g[static_cast<std::size_t>(o * n * v.inner + t)] +=
                                 og.grad[static_cast<std::size_t>(
                                     (o * total + offsets[j]) * v.inner + t)];
                       }
                     });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(a, axis);
  const auto v = axis_view(a.shape(), ax);
  if (start < 0 || length <= 0 || start + length > v.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  std::vector<std::int64_t> src(static_cast<std::size_t>(v.outer * length * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t k = 0; k < length; ++k)
      for (std::int64_t i = 0; i < v.inner; ++i)
        src[static_cast<std::size_t>((o * length + k) * v.inner + i)] =
            (o * v.n + start + k) * v.inner + i;
  return gather(a, std::move(out_shape), std::move(src));
}

std::vector<Tensor> split(const Tensor& a, int axis, int parts) {
  const std::int64_t n = a.dim(axis);
  if (parts <= 0 || n % parts != 0) {
    throw ShapeError("split: axis of size " + std::to_string(n) + " not divisible into " +
                     std::to_string(parts));
  }
  std::vector<Tensor> out;
  const std::int64_t len = n / parts;
  for (int i = 0; i < parts; ++i) out.push_back(slice(a, axis, i * len, len));
  return out;
}

Tensor flip(const Tensor& a, int axis) {
  const int ax = normalize_axis(a, axis);
  const auto v = axis_view(a.shape(), ax);
  std::vector<std::int64_t> src(static_cast<std::size_t>(a.numel()));
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t k = 0; k < v.n; ++k)
      for (std::int64_t i = 0; i < v.inner; ++i)
        src[static_cast<std::size_t>((o * v.n + k) * v.inner + i)] =
            (o * v.n + (v.n - 1 - k)) * v.inner + i;
  return gather(a, a.shape(), std::move(src));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("matmul: incompatible ranks " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2), p = a.dim(-1), p2 = b.dim(-2), n = b.dim(-1);
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (p != p2 || lead_a != lead_b) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t batch = shape_numel(lead_a.empty() ? Shape{1} : lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i) {
    ConstMatMap A(a.data().data() + i * m * p, m, p);
    ConstMatMap B(b.data().data() + i * p * n, p, n);
    MatMap C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [a, b, batch, m, p, n](const TensorImpl& o) {
                       auto ga = grad_buffer(a);
                       auto gb = grad_buffer(b);
                       for (std::int64_t i = 0; i < batch; ++i) {
                         ConstMatMap G(o.grad.data() + i * m * n, m, n);
                         if (!ga.empty()) {
                           ConstMatMap B(b.data().data() + i * p * n, p, n);
                           MatMap GA(ga.data() + i * m * p, m, p);
                           GA.noalias() += G * B.transpose();
                         }
                         if (!gb.empty()) {
                           ConstMatMap A(a.data().data() + i * m * p, m, p);
                           MatMap GB(gb.data() + i * p * n, p, n);
                           GB.noalias() += A.transpose() * G;
                         }
                       }
                     });
}

namespace {

void softmax_backward(const Tensor& input, const TensorImpl& o, std::int64_t cols) {
  auto gi = grad_buffer(input);
  if (gi.empty()) return;
  const std::int64_t rows = static_cast<std::int64_t>(o.data.size()) / cols;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* y = o.data.data() + r * cols;
    const double* g = o.grad.data() + r * cols;
    double dot = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
    double* dx = gi.data() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) dx[c] += y[c] * (g[c] - dot);
  }
}

Tensor softmax_impl(const Tensor& p, const std::uint8_t* keep) {
  const std::int64_t cols = p.dim(-1);
  const std::int64_t rows = p.numel() / cols;
  const auto x = p.data();
  std::vector<double> out(x.size(), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    std::int64_t kept = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      if (keep && !keep[base + c]) continue;
      const double v = x[static_cast<std::size_t>(base + c)];
      mx = std::isnan(v) ? v : std::max(mx, v);
      if (std::isnan(mx)) break;
      ++kept;
    }
    if (kept == 0 && !std::isnan(mx)) {
      throw std::domain_error("softmax_rows: row " + std::to_string(r) +
                              " has no unmasked entry");
    }
    if (!std::isfinite(mx)) {
      for (std::int64_t c = 0; c < cols; ++c) {
        if (!keep || keep[base + c]) {
          out[static_cast<std::size_t>(base + c)] = std::numeric_limits<double>::quiet_NaN();
        }
      }
      continue;
    }
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      if (keep && !keep[base + c]) continue;
      const double e = std::exp(x[static_cast<std::size_t>(base + c)] - mx);
      out[static_cast<std::size_t>(base + c)] = e;
      z += e;
    }
    for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(base + c)] /= z;
  }
  return make_result(p.shape(), std::move(out), {p},
                     [p, cols](const TensorImpl& o) { softmax_backward(p, o, cols); });
}

}  // namespace

Tensor softmax_rows(const Tensor& p) { return softmax_impl(p, nullptr); }

Tensor softmax_rows(const MaskedScores& p) {
  if (static_cast<std::int64_t>(p.keep.size()) != p.values.numel()) {
    throw ShapeError("softmax_rows: mask size does not match scores " +
                     shape_str(p.values.shape()));
  }
  return softmax_impl(p.values, p.keep.data());
}

}  // namespace ddsa
