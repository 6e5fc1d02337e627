#include "doctest.h"

#include <cmath>

#include "ddsa/ops.hpp"
#include "ddsa/training.hpp"
#include "support.hpp"

using namespace ddsa;
using testing::rand_tensor;

namespace {

TrainConfig tiny_train(std::int64_t steps) {
  TrainConfig t = TrainConfig::desk();
  t.total_steps = steps;
  t.fixed_lr_steps = steps / 2;
  t.batch_size = 1;
  t.patch_size = 16;
  t.seed = 4;
  return t;
}

ModelConfig tiny_model() {
  ModelConfig m = ModelConfig::desk();
  m.base_channels = 4;
  m.levels = 2;
  m.depths = {1, 1, 1};
  m.heads = {1, 1, 2};
  return m;
}

}  // namespace

TEST_CASE("l1 loss of a constant offset") {
  const Tensor gt = rand_tensor({1, 3, 4, 4}, 1, 0, 1);
  CHECK(l1_loss(add_scalar(gt, 0.1), gt).item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(l1_loss(gt, gt).item() == 0.0);
}

TEST_CASE("adamw single step") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor w = Tensor::scalar(1.0);
  w.set_requires_grad();
  ParamList ps{{"w", w}};
  OptState st = make_opt_state(ps);
  detail::accumulate(w, std::vector<double>{1.0});
  adamw_step(ps, st, cfg, 0.1);
  CHECK(w.item() == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(st.step == 1);
}

TEST_CASE("adamw decay only") {
  TrainConfig cfg;
  cfg.weight_decay = 0.05;
  Tensor w = testing::from_values({3}, {1.0, -2.0, 0.5});
  w.set_requires_grad();
  ParamList ps{{"w", w}};
  OptState st = make_opt_state(ps);
  detail::accumulate(w, std::vector<double>{0, 0, 0});
  adamw_step(ps, st, cfg, 0.1);
  const double f = 1.0 - 0.1 * 0.05;
  CHECK(w.at({0}) == doctest::Approx(1.0 * f).epsilon(1e-15));
  CHECK(w.at({1}) == doctest::Approx(-2.0 * f).epsilon(1e-15));
  CHECK(w.at({2}) == doctest::Approx(0.5 * f).epsilon(1e-15));
}

TEST_CASE("adamw bias correction over two steps") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor w = Tensor::scalar(0.0);
  w.set_requires_grad();
  ParamList ps{{"w", w}};
  OptState st = make_opt_state(ps);
  double m = 0, v = 0, ref = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? 2.0 : -1.0;
    w.zero_grad();
    detail::accumulate(w, std::vector<double>{g});
    adamw_step(ps, st, cfg, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(w.item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.total_steps = 300;
  cfg.fixed_lr_steps = 92;
  CHECK(lr_at(0, cfg) == 1e-4);
  CHECK(lr_at(91, cfg) == 1e-4);
  CHECK(lr_at(92, cfg) == doctest::Approx(1e-4));
  CHECK(lr_at(299, cfg) < 1e-4 * 1e-3);
  CHECK(lr_at(299, cfg) >= 0.0);
  for (std::int64_t s = 93; s < 300; ++s) CHECK(lr_at(s, cfg) <= lr_at(s - 1, cfg));
  const double mid = lr_at(92 + (300 - 92) / 2, cfg);
  CHECK(mid == doctest::Approx(5e-5).epsilon(0.02));
  CHECK_THROWS(lr_at(300, cfg));
  CHECK_THROWS(lr_at(-1, cfg));
  const TrainConfig paper = TrainConfig::paper();
  CHECK(lr_at(0, paper) == 1e-4);
  CHECK(lr_at(paper.fixed_lr_steps - 1, paper) == 1e-4);
  CHECK(lr_at(paper.total_steps - 1, paper) < 1e-4 * 1e-3);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate(16));
  t.patch_size = 20;
  CHECK_THROWS_AS(t.validate(16), ConfigError);
  t = TrainConfig{};
  t.lr = -1;
  CHECK_THROWS_AS(t.validate(16), ConfigError);
  t = TrainConfig{};
  t.fixed_lr_steps = t.total_steps + 1;
  CHECK_THROWS_AS(t.validate(16), ConfigError);
  const TrainConfig p = TrainConfig::paper();
  CHECK(p.batch_size == 16);
  CHECK(p.patch_size == 128);
  CHECK(p.lr == 1e-4);
}

TEST_CASE("flip twice is the identity") {
  const ImagePair p{rand_tensor({3, 5, 4}, 2), rand_tensor({3, 5, 4}, 3)};
  for (bool h : {false, true})
    for (bool v : {false, true}) {
      const ImagePair once = flip_pair(p, h, v);
      const ImagePair twice = flip_pair(once, h, v);
      CHECK(testing::bitwise_equal(twice.rainy, p.rainy));
      CHECK(testing::bitwise_equal(twice.clean, p.clean));
      if (h && !v) CHECK(once.rainy.at({1, 0, 0}) == p.rainy.at({1, 0, 3}));
      if (v && !h) CHECK(once.clean.at({2, 0, 1}) == p.clean.at({2, 4, 1}));
    }
}

TEST_CASE("synthetic rain") {
  Rng rng(5);
  const Tensor clean = procedural_texture(32, 32, rng);
  for (double v : clean.data()) CHECK((v >= 0.0 && v <= 1.0));
  Rng r0(6);
  const ImagePair none = synth_rain(clean, r0, 0.0);
  CHECK(testing::bitwise_equal(none.rainy, clean));
  for (double sev : {0.3, 1.0}) {
    Rng r1(7);
    const ImagePair rain = synth_rain(clean, r1, sev);
    CHECK(mean(rain.rainy).item() >= mean(rain.clean).item());
    CHECK(testing::max_abs_diff(rain.rainy, rain.clean) > 0.05);
    for (double v : rain.rainy.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  const auto a = synthetic_dataset(3, 32, 0.5, 8), b = synthetic_dataset(3, 32, 0.5, 8);
  for (std::size_t i = 0; i < 3; ++i) CHECK(testing::bitwise_equal(a[i].rainy, b[i].rainy));
}

TEST_CASE("step rng depends only on its key") {
  Rng a = step_rng(1, 2, 3), b = step_rng(1, 2, 3), c = step_rng(1, 2, 4), d = step_rng(1, 3, 3);
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}

TEST_CASE("batch sampling is reproducible per step") {
  const auto data = synthetic_dataset(2, 32, 0.5, 9);
  const TrainConfig cfg = tiny_train(10);
  const Batch a = sample_batch(data, cfg, 3), b = sample_batch(data, cfg, 3);
  CHECK(a.rainy.shape() == Shape{1, 3, 16, 16});
  CHECK(testing::bitwise_equal(a.rainy, b.rainy));
  CHECK(testing::bitwise_equal(a.clean, b.clean));
}

TEST_CASE("seeded training runs are reproducible") {
  const auto data = synthetic_dataset(2, 32, 0.5, 10);
  const TrainConfig cfg = tiny_train(6);
  auto run = [&] {
    const DerainNet net(tiny_model(), 11);
    OptState st;
    return train_loop(net, data, cfg, st);
  };
  const auto h1 = run(), h2 = run();
  REQUIRE(h1.size() == 6);
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].step == static_cast<std::int64_t>(i));
    CHECK(h1[i].loss == h2[i].loss);
    CHECK(h1[i].lr == h2[i].lr);
  }
}

TEST_CASE("a small step lowers the loss on its batch") {
  const auto data = synthetic_dataset(1, 16, 0.6, 12);
  TrainConfig cfg = tiny_train(1);
  cfg.fixed_lr_steps = 1;
  cfg.lr = 1e-6;
  cfg.weight_decay = 0.0;
  cfg.augment = false;
  const DerainNet net(tiny_model(), 13);
  const Batch batch = sample_batch(data, cfg, 0);
  const double before = l1_loss(net.forward(batch.rainy), batch.clean).item();
  OptState st;
  const auto hist = train_loop(net, data, cfg, st);
  CHECK(hist.front().loss == doctest::Approx(before).epsilon(1e-12));
  const double after = l1_loss(net.forward(batch.rainy), batch.clean).item();
  CHECK(after < before);
}

TEST_CASE("non-finite loss stops training") {
  const auto data = synthetic_dataset(1, 16, 0.5, 14);
  TrainConfig cfg = tiny_train(5);
  cfg.lr = 1e300;
  const DerainNet net(tiny_model(), 15);
  OptState st;
  CHECK_THROWS_AS(train_loop(net, data, cfg, st), TrainingDiverged);
}

TEST_CASE("checkpoint boundaries quantize to float") {
  const auto data = synthetic_dataset(1, 16, 0.5, 16);
  TrainConfig cfg = tiny_train(4);
  cfg.checkpoint_every = 2;
  const DerainNet net(tiny_model(), 17);
  OptState st;
  std::vector<std::int64_t> seen;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::int64_t done, const OptState& s) {
    seen.push_back(done);
    for (const auto& p : net.parameters())
      for (double v : p.tensor.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
    for (const auto& m : s.m)
      for (double v : m) CHECK(static_cast<double>(static_cast<float>(v)) == v);
  };
  train_loop(net, data, cfg, st, hooks);
  CHECK(seen == std::vector<std::int64_t>{2, 4});
}
