#include "ddsa/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ddsa/ops.hpp"

namespace ddsa {

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.lr = 1e-4;
  c.total_steps = 300000;
  c.fixed_lr_steps = 92000;
  c.batch_size = 16;
  c.patch_size = 128;
  return c;
}

void TrainConfig::validate(std::int64_t spatial_multiple) const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
  if (fixed_lr_steps < 0 || fixed_lr_steps > total_steps) {
    throw ConfigError("train.fixed_lr_steps must lie in [0, total_steps]");
  }
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (patch_size <= 0 || patch_size % spatial_multiple != 0) {
    throw ConfigError("train.patch_size must be a positive multiple of " +
                      std::to_string(spatial_multiple));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
}

Tensor l1_loss(const Tensor& derain, const Tensor& gt) {
  if (derain.shape() != gt.shape()) {
    throw ShapeError("l1_loss: shape mismatch " + shape_str(derain.shape()) + " vs " +
                     shape_str(gt.shape()));
  }
  return mean(abs(sub(derain, gt)));
}

OptState make_opt_state(const ParamList& params) {
  OptState s;
  for (const auto& p : params) {
    s.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    s.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
  return s;
}

void adamw_step(const ParamList& params, OptState& state, const TrainConfig& cfg, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state does not match parameter list");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].tensor;
    auto data = w.mutable_data();
    const auto grad = w.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size() || v.size() != data.size()) {
      throw ShapeError("adamw_step: moment shape mismatch for " + params[i].name);
    }
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      if (cfg.weight_decay != 0.0) data[j] *= 1.0 - lr * cfg.weight_decay;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      data[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step >= cfg.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(cfg.total_steps) + ")");
  }
  if (step < cfg.fixed_lr_steps) return cfg.lr;
  const double span = static_cast<double>(cfg.total_steps - cfg.fixed_lr_steps);
  const double progress = static_cast<double>(step - cfg.fixed_lr_steps) / span;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ImagePair flip_pair(const ImagePair& pair, bool horizontal, bool vertical) {
  ImagePair out = pair;
  if (horizontal) {
    out.rainy = flip(out.rainy, -1);
    out.clean = flip(out.clean, -1);
  }
  if (vertical) {
    out.rainy = flip(out.rainy, -2);
    out.clean = flip(out.clean, -2);
  }
  return out;
}

ImagePair augment_flip(const ImagePair& pair, Rng& rng) {
  const bool horizontal = (rng() >> 63) != 0;
  const bool vertical = (rng() >> 63) != 0;
  return flip_pair(pair, horizontal, vertical);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Bilinear splat of `value` at (y, x) into a [h,w] plane.
void splat(std::vector<double>& plane, std::int64_t h, std::int64_t w, double y, double x,
           double value) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto iy = static_cast<std::int64_t>(fy), ix = static_cast<std::int64_t>(fx);
  const double wts[4] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
  const std::int64_t ys[4] = {iy, iy, iy + 1, iy + 1};
  const std::int64_t xs[4] = {ix, ix + 1, ix, ix + 1};
  for (int k = 0; k < 4; ++k) {
    if (ys[k] < 0 || ys[k] >= h || xs[k] < 0 || xs[k] >= w) continue;
    plane[static_cast<std::size_t>(ys[k] * w + xs[k])] += value * wts[k];
  }
}

double sample_bilinear(const std::vector<double>& plane, std::int64_t h, std::int64_t w, double y,
                       double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto iy = static_cast<std::int64_t>(fy), ix = static_cast<std::int64_t>(fx);
  auto at = [&](std::int64_t yy, std::int64_t xx) {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return plane[static_cast<std::size_t>(yy * w + xx)];
  };
  return (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
         ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
}

}  // namespace

Rng step_rng(std::uint64_t seed, std::uint64_t stream, std::int64_t step) {
  const std::uint64_t a = splitmix64(seed ^ splitmix64(stream));
  return Rng(splitmix64(a ^ splitmix64(static_cast<std::uint64_t>(step) + 0x632BE59BD9B4E019ULL)));
}

ImagePair synth_rain(const Tensor& clean, Rng& rng, double severity) {
  if (clean.rank() != 3 || clean.dim(0) != 3) {
    throw ShapeError("synth_rain expects [3,h,w], got " + shape_str(clean.shape()));
  }
  if (severity <= 0.0) return {clean.detach(), clean.detach()};
  const std::int64_t h = clean.dim(1), w = clean.dim(2);
  const double extent = static_cast<double>(std::max(h, w));
  const double deg = std::numbers::pi / 180.0;
  const double base_angle = uniform(rng, 60.0, 120.0);
  const auto count = std::max<std::int64_t>(
      1, std::llround(severity * static_cast<double>(h * w) / 48.0));

  std::vector<double> streaks(static_cast<std::size_t>(h * w), 0.0);
  for (std::int64_t s = 0; s < count; ++s) {
    const double angle = std::clamp(base_angle + uniform(rng, -4.0, 4.0), 60.0, 120.0) * deg;
    const double dy = std::sin(angle), dx = std::cos(angle);
    const double cy = uniform(rng, -0.1, 1.1) * static_cast<double>(h);
    const double cx = uniform(rng, -0.1, 1.1) * static_cast<double>(w);
    const double length = uniform(rng, 0.1, 0.35) * extent * (0.6 + 0.4 * std::min(severity, 2.0));
    const double width = uniform(rng, 0.6, 1.0 + 0.5 * std::min(severity, 2.0));
    const double intensity = uniform(rng, 0.15, 0.45) * std::min(1.0, 0.5 + severity);
    // walk along the segment, spreading across its width
    for (double t = -length / 2; t <= length / 2; t += 0.5) {
      for (double u = -width / 2; u <= width / 2 + 1e-12; u += 0.5) {
        const double y = cy + t * dy + u * dx;
        const double x = cx + t * dx - u * dy;
        splat(streaks, h, w, y, x, intensity * 0.5 / std::max(1.0, width));
      }
    }
  }

  // motion blur along the mean streak direction
  const double dy = std::sin(base_angle * deg), dx = std::cos(base_angle * deg);
  std::vector<double> blurred(streaks.size(), 0.0);
  constexpr int taps = 5;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -(taps / 2); k <= taps / 2; ++k) {
        acc += sample_bilinear(streaks, h, w, static_cast<double>(y) + k * dy,
                               static_cast<double>(x) + k * dx);
      }
      blurred[static_cast<std::size_t>(y * w + x)] = std::min(1.0, acc / taps);
    }
  }

  Tensor rainy(clean.shape());
  auto out = rainy.mutable_data();
  const auto in = clean.data();
  const std::int64_t plane = h * w;
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const auto idx = static_cast<std::size_t>(c * plane + i);
      out[idx] = std::clamp(in[idx] + blurred[static_cast<std::size_t>(i)], 0.0, 1.0);
    }
  }
  return {rainy, clean.detach()};
}

Tensor procedural_texture(std::int64_t height, std::int64_t width, Rng& rng) {
  Tensor img(Shape{3, height, width});
  auto d = img.mutable_data();
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  double base[3], gy[3], gx[3], stripe_amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = uniform(rng, 0.15, 0.6);
    gy[c] = uniform(rng, -0.25, 0.25);
    gx[c] = uniform(rng, -0.25, 0.25);
    stripe_amp[c] = uniform(rng, 0.0, 0.12);
  }
  const double freq = uniform(rng, 1.0, 5.0) * 2.0 * std::numbers::pi;
  const double theta = uniform(rng, 0.0, std::numbers::pi);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  struct Blob {
    double y, x, r, color[3];
  };
  Blob blobs[3];
  for (auto& b : blobs) {
    b.y = uniform(rng, 0.0, 1.0);
    b.x = uniform(rng, 0.0, 1.0);
    b.r = uniform(rng, 0.08, 0.3);
    for (double& col : b.color) col = uniform(rng, -0.2, 0.25);
  }
  const double cy0 = uniform(rng, 0.0, 0.6), cx0 = uniform(rng, 0.0, 0.6);
  const double cell = uniform(rng, 0.04, 0.12);
  const double checker_amp = uniform(rng, 0.05, 0.15);

  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      const double v = (static_cast<double>(y) + 0.5) / H;
      const double u = (static_cast<double>(x) + 0.5) / W;
      const double stripe = std::sin(freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
      double checker = 0.0;
      if (v >= cy0 && v < cy0 + 0.4 && u >= cx0 && u < cx0 + 0.4) {
        const auto cyi = static_cast<std::int64_t>(std::floor((v - cy0) / cell));
        const auto cxi = static_cast<std::int64_t>(std::floor((u - cx0) / cell));
        checker = ((cyi + cxi) % 2 == 0) ? checker_amp : -checker_amp;
      }
      for (int c = 0; c < 3; ++c) {
        double val = base[c] + gy[c] * (v - 0.5) + gx[c] * (u - 0.5) + stripe_amp[c] * stripe + checker;
        for (const auto& b : blobs) {
          const double r2 = ((v - b.y) * (v - b.y) + (u - b.x) * (u - b.x)) / (b.r * b.r);
          val += b.color[c] * std::exp(-r2);
        }
        d[static_cast<std::size_t>((c * height + y) * width + x)] = std::clamp(val, 0.0, 0.9);
      }
    }
  }
  return img;
}

std::vector<ImagePair> synthetic_dataset(std::int64_t count, std::int64_t size, double severity,
                                         std::uint64_t seed) {
  std::vector<ImagePair> out;
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = step_rng(seed, 0x7E47u, i);
    const Tensor clean = procedural_texture(size, size, rng);
    out.push_back(synth_rain(clean, rng, severity));
  }
  return out;
}

void quantize_to_f32(const ParamList& params, OptState& state) {
  auto round_f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v = round_f32(v);
  }
  for (auto& m : state.m)
    for (auto& v : m) v = round_f32(v);
  for (auto& vv : state.v)
    for (auto& v : vv) v = round_f32(v);
}

TrainingDiverged::TrainingDiverged(std::int64_t step, double loss)
    : std::runtime_error("non-finite loss " + std::to_string(loss) + " at step " +
                         std::to_string(step)),
      step_(step) {}

Batch sample_batch(const std::vector<ImagePair>& dataset, const TrainConfig& cfg,
                   std::int64_t step) {
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  Rng rng = step_rng(cfg.seed, 0xBA7C4u, step);
  const std::int64_t P = cfg.patch_size;
  std::vector<Tensor> rainy, clean;
  for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
    const auto& pair = dataset[static_cast<std::size_t>(rng() % dataset.size())];
    const std::int64_t h = pair.rainy.dim(1), w = pair.rainy.dim(2);
    if (h < P || w < P) {
      throw ConfigError("image of " + std::to_string(h) + "x" + std::to_string(w) +
                        " is smaller than train.patch_size " + std::to_string(P));
    }
    const auto y0 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(h - P + 1));
    const auto x0 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(w - P + 1));
    ImagePair patch{slice(slice(pair.rainy, 1, y0, P), 2, x0, P),
                    slice(slice(pair.clean, 1, y0, P), 2, x0, P)};
    if (cfg.augment) patch = augment_flip(patch, rng);
    rainy.push_back(reshape(patch.rainy, Shape{1, 3, P, P}));
    clean.push_back(reshape(patch.clean, Shape{1, 3, P, P}));
  }
  return {concat(rainy, 0), concat(clean, 0)};
}

std::vector<LossRecord> train_loop(const DerainNet& model, const std::vector<ImagePair>& dataset,
                                   const TrainConfig& cfg, OptState& state,
                                   const TrainHooks& hooks) {
  cfg.validate(model.config().spatial_multiple());
  const ParamList params = model.parameters();
  if (state.m.empty()) {
    const std::int64_t start = state.step;
    state = make_opt_state(params);
    state.step = start;
  }
  std::vector<LossRecord> history;
  for (std::int64_t step = state.step; step < cfg.total_steps; ++step) {
    const Batch batch = sample_batch(dataset, cfg, step);
    for (const auto& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
    double loss_value = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = l1_loss(model.forward(batch.rainy), batch.clean);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw TrainingDiverged(step, loss_value);
      tape.backward(loss);
    }
    const double lr = lr_at(step, cfg);
    adamw_step(params, state, cfg, lr);
    const LossRecord rec{step, lr, loss_value};
    history.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);

    const std::int64_t done = step + 1;
    const bool boundary = (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) ||
                          done == cfg.total_steps;
    if (boundary) {
      quantize_to_f32(params, state);
      if (hooks.on_checkpoint) hooks.on_checkpoint(done, state);
    }
  }
  return history;
}

}  // namespace ddsa
