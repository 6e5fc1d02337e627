#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "ddsa/model.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/tensor.hpp"

namespace ddsa {

struct GradCheckOptions {
  double step = 1e-5;          // central-difference h
  double tolerance = 1e-4;     // layer checks
  double model_tolerance = 1e-3;
  int samples_per_tensor = 6;  // entries probed per tensor (all if fewer)
  std::uint64_t seed = 7;
};

struct GradCheckRow {
  std::string name;
  std::int64_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// |analytic - numeric| / (|numeric| + 1e-8)
double gradient_relative_error(double analytic, double numeric);

/// Compares one backward pass against central differences for sampled
/// entries of every tensor in `wrt` (leaves; they are perturbed in place and
/// restored). One row per tensor. With `freeze_topk`, top-k masks from the
/// unperturbed forward are replayed during the perturbed ones.
std::vector<GradCheckRow> check_gradients(const std::function<Tensor()>& loss_fn,
                                          const ParamList& wrt, const GradCheckOptions& opts,
                                          double tolerance, bool freeze_topk = false);

/// mean(forward() * R) for a fixed random R in [-1,1]; R is drawn on the
/// first call from `seed` and reused afterwards.
std::function<Tensor()> weighted_sum_loss(std::function<Tensor()> forward, std::uint64_t seed);

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  /// Number of leading rows that come from single layers; the remaining
  /// rows are one per parameter tensor of the full model.
  std::size_t layer_rows = 0;
  /// Check of an op whose backward is deliberately wrong; it must fail.
  GradCheckRow control;


  bool passed() const;
  double max_rel_error() const;
  void write(std::ostream& os) const;
};

/// x^2 elementwise with a backward that returns 3x instead of 2x.
Tensor corrupted_square(const Tensor& x);

/// Runs the checker on corrupted_square; a working checker fails this row.
GradCheckRow negative_control(const GradCheckOptions& opts);

/// Every layer type (matmul, softmax, conv, depth-wise conv, layer norm,
/// resampling, DDSA with its top-k path, SEFN, DATB) and the full model
/// built from `model_cfg` on a 16x16 input.
GradCheckReport run_gradcheck_suite(const ModelConfig& model_cfg, const GradCheckOptions& opts);

}  // namespace ddsa
