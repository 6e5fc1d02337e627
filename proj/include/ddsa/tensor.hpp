#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddsa {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown on any shape or dimension inconsistency.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when layer or model hyperparameters are inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

namespace detail {

struct TensorImpl;

/// Local backward rule; receives the output node (its data and its grad).
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  BackwardFn backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major f64 array with optional gradient tracking.
///
/// A Tensor is a handle: copies share storage. Tensors produced by ops are
/// treated as immutable; only leaves (parameters, fresh inputs) are written
/// through mutable_data().
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Zeros until backward() reached this tensor.
  std::span<const double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of the values; the copy does not require grad.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Nodes are appended as ops execute, so recording order is a topological
/// order. backward() walks the record once in reverse; a second call without
/// reset() throws instead of double-accumulating.
class Tape {
 public:
  void record(std::shared_ptr<detail::TensorImpl> node);
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target of the current thread for its lifetime.
/// Without an active tape ops run in inference mode and record nothing.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

namespace detail {

/// Builds an op result. When a tape is active and any input requires grad,
/// the result is recorded with `backward`; otherwise `backward` is dropped.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

/// Adds `g` into the gradient buffer of `t` if it tracks gradients.
void accumulate(const Tensor& t, std::span<const double> g);
/// Mutable gradient buffer of `t`, allocated on demand; empty span if `t`
/// does not require grad.
std::span<double> grad_buffer(const Tensor& t);

}  // namespace detail

}  // namespace ddsa
