#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddsa/model.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/tensor.hpp"

namespace ddsa {

/// A rainy/clean pair, each [3,h,w] with values in [0,1].
struct ImagePair {
  Tensor rainy;
  Tensor clean;
};

struct TrainConfig {
  double lr = 1e-4;
  std::int64_t total_steps = 300;
  std::int64_t fixed_lr_steps = 92;
  std::int64_t batch_size = 2;
  std::int64_t patch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  bool augment = true;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;

  static TrainConfig desk();
  static TrainConfig paper();
  /// `spatial_multiple` comes from the model config.
  void validate(std::int64_t spatial_multiple) const;

  bool operator==(const TrainConfig&) const = default;
};

/// Mean absolute error.
Tensor l1_loss(const Tensor& derain, const Tensor& gt);

/// Per-parameter AdamW moments, in ParamList order.
struct OptState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

OptState make_opt_state(const ParamList& params);

/// One AdamW update with bias correction and decoupled weight decay, using
/// the gradients currently stored on `params`:
///   w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
void adamw_step(const ParamList& params, OptState& state, const TrainConfig& cfg, double lr);

/// Constant lr for step < fixed_lr_steps, then one cosine decay towards 0
/// reached at total_steps.
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Flips rainy and clean together; each axis with probability 1/2.
ImagePair augment_flip(const ImagePair& pair, Rng& rng);
ImagePair flip_pair(const ImagePair& pair, bool horizontal, bool vertical);

/// Adds oriented, motion-blurred bright streaks to `clean`. Severity 0
/// returns the input unchanged; larger values add more, longer, brighter
/// streaks.
ImagePair synth_rain(const Tensor& clean, Rng& rng, double severity);

/// Procedural clean image [3,h,w] in [0,1]: gradients, sinusoidal stripes,
/// soft blobs and a checker patch.
Tensor procedural_texture(std::int64_t height, std::int64_t width, Rng& rng);

/// `count` synthetic pairs from procedural textures.
std::vector<ImagePair> synthetic_dataset(std::int64_t count, std::int64_t size, double severity,
                                         std::uint64_t seed);

/// Engine seeded from (seed, stream, step); independent of call history.
Rng step_rng(std::uint64_t seed, std::uint64_t stream, std::int64_t step);

/// Rounds every parameter and AdamW moment to float precision.
void quantize_to_f32(const ParamList& params, OptState& state);

struct LossRecord {
  std::int64_t step;
  double lr;
  double loss;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, double loss);
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainHooks {
  /// Called after every step with its record.
  std::function<void(const LossRecord&)> on_step;
  /// Called at checkpoint boundaries, after quantization; the argument is the
  /// number of completed steps.
  std::function<void(std::int64_t, const OptState&)> on_checkpoint;
};

/// sample -> augment -> forward -> L1 -> backward -> AdamW, for steps
/// [state.step, cfg.total_steps). Parameters and moments are quantized to
/// f32 at every checkpoint boundary (every checkpoint_every steps and at the
/// end) so that a run resumed from a saved checkpoint replays the same
/// trajectory bitwise. Throws TrainingDiverged on a non-finite loss.
std::vector<LossRecord> train_loop(const DerainNet& model, const std::vector<ImagePair>& dataset,
                                   const TrainConfig& cfg, OptState& state,
                                   const TrainHooks& hooks = {});

/// Stacked training batch, each [batch,3,patch,patch].
struct Batch {
  Tensor rainy;
  Tensor clean;
};

/// Draws the batch for `step`: random image, random patch, optional flip.
Batch sample_batch(const std::vector<ImagePair>& dataset, const TrainConfig& cfg,
                   std::int64_t step);

}  // namespace ddsa
