#include "doctest.h"

#include <cmath>

#include "ddsa/ops.hpp"
#include "ddsa/sefn.hpp"
#include "support.hpp"

using namespace ddsa;
using testing::analytic_grad;
using testing::max_rel_error;
using testing::numeric_grad;
using testing::rand_tensor;

namespace {

void zero_all(Conv2dParams& c) {
  for (auto& v : c.weight.mutable_data()) v = 0.0;
  if (c.bias)
    for (auto& v : c.bias->mutable_data()) v = 0.0;
}

// 1x1 conv as a per-pixel matrix-vector product.
Tensor pointwise(const Tensor& x, const Conv2dParams& p) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = p.out_channels();
  Tensor out({B, O, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t xx = 0; xx < W; ++xx) {
          double s = p.bias ? p.bias->at({o}) : 0.0;
          for (std::int64_t c = 0; c < C; ++c) s += p.weight.at({o, c, 0, 0}) * x.at({b, c, y, xx});
          out.mutable_data()[static_cast<std::size_t>(((b * O + o) * H + y) * W + xx)] = s;
        }
  return out;
}

double gelu_ref(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("hidden width rounds up to a multiple of three") {
  CHECK(sefn_hidden_channels(12, 2.66) == 33);
  CHECK(sefn_hidden_channels(6, 1.0) == 6);
  CHECK(sefn_hidden_channels(4, 1.0) == 6);
  CHECK(sefn_hidden_channels(48, 2.66) % 3 == 0);
}

TEST_CASE("zero res2 convs keep only the first group") {
  Rng rng(1);
  SefnParams p = make_sefn(6, {}, rng);
  zero_all(p.res2[0]);
  zero_all(p.res2[1]);
  const std::int64_t m = p.hidden();
  const Tensor x = rand_tensor({2, m, 4, 3}, 2);
  const Tensor y = res2_multiscale(x, p);
  CHECK(y.shape() == x.shape());
  const auto g = m / 3;
  CHECK(testing::bitwise_equal(slice(y, 1, 0, g), slice(x, 1, 0, g)));
  const Tensor rest = slice(y, 1, g, 2 * g);
  for (double v : rest.data()) CHECK(v == 0.0);
}

TEST_CASE("res2 follows the hierarchical recurrence") {
  Rng rng(3);
  SefnParams p = make_sefn(4, {}, rng);
  const std::int64_t m = p.hidden(), g = m / 3;
  const Tensor x = rand_tensor({1, m, 5, 5}, 4);
  const auto parts = split(x, 1, 3);
  const Tensor y2 = conv2d(add(parts[1], parts[0]), p.res2[0]);
  const Tensor y3 = conv2d(add(parts[2], y2), p.res2[1]);
  const Tensor want = concat({parts[0], y2, y3}, 1);
  CHECK(testing::bitwise_equal(res2_multiscale(x, p), want));
  CHECK(g * 3 == m);
}

TEST_CASE("zero spatial-attention conv halves the input") {
  Rng rng(5);
  SefnParams p = make_sefn(6, {}, rng);
  zero_all(p.sa_conv);
  const Tensor x = rand_tensor({1, 6, 4, 4}, 6);
  CHECK(testing::max_abs_diff(spatial_attention(x, p), scale(x, 0.5)) == 0.0);
}

TEST_CASE("spatial attention map is in (0,1) and constant for constant input") {
  Rng rng(7);
  const SefnParams p = make_sefn(6, {}, rng);
  const Tensor x = rand_tensor({2, 6, 9, 9}, 8, -3, 3);
  const Tensor map = spatial_attention_map(x, p);
  CHECK(map.shape() == Shape{2, 1, 9, 9});
  for (double v : map.data()) CHECK((v > 0.0 && v < 1.0));
  // constant input: interior pixels (away from the zero padding) share one value
  const Tensor flat({1, 6, 9, 9}, 0.4);
  const Tensor cm = spatial_attention_map(flat, p);
  CHECK(cm.at({0, 0, 4, 4}) == doctest::Approx(cm.at({0, 0, 3, 5})).epsilon(1e-14));
}

TEST_CASE("both flags off is a two-layer pointwise MLP") {
  Rng rng(9);
  SefnOptions o;
  o.use_multiscale = false;
  o.use_sa = false;
  const SefnParams p = make_sefn(5, o, rng);
  const Tensor x = rand_tensor({2, 5, 3, 4}, 10);
  Tensor h = pointwise(x, p.expand);
  for (auto& v : h.mutable_data()) v = gelu_ref(v);
  const Tensor want = pointwise(h, p.project);
  CHECK(testing::max_abs_diff(sefn_forward(x, p), want) < 1e-12);

  ParamList used;
  p.collect(used, "f");
  CHECK(used.size() == 4);
}

TEST_CASE("zero input maps to a bias-determined field") {
  Rng rng(11);
  SefnParams p = make_sefn(6, {}, rng);
  const Tensor zero({1, 6, 16, 16});
  const Tensor y = sefn_forward(zero, p);
  // interior: beyond the receptive reach of zero padding
  for (std::int64_t c = 0; c < 6; ++c)
    for (std::int64_t r = 6; r < 10; ++r)
      for (std::int64_t col = 6; col < 10; ++col)
        CHECK(y.at({0, c, r, col}) == doctest::Approx(y.at({0, c, 8, 8})).epsilon(1e-13));
  for (auto* conv : {&p.expand, &p.res2[0], &p.res2[1], &p.sa_conv, &p.project})
    for (auto& v : conv->bias->mutable_data()) v = 0.0;
  const Tensor biasless = sefn_forward(zero, p);
  for (double v : biasless.data()) CHECK(v == 0.0);
}

TEST_CASE("sefn shape preservation for every flag combination") {
  Rng rng(12);
  for (bool ms : {false, true})
    for (bool sa : {false, true}) {
      SefnOptions o;
      o.use_multiscale = ms;
      o.use_sa = sa;
      const SefnParams p = make_sefn(7, o, rng);
      const Tensor x = rand_tensor({1, 7, 5, 6}, 13);
      CHECK(sefn_forward(x, p).shape() == x.shape());
    }
}

TEST_CASE("sefn gradients") {
  Rng rng(14);
  SefnOptions o;
  o.expansion = 1.0;
  const SefnParams p = make_sefn(6, o, rng);
  Tensor x = rand_tensor({1, 6, 3, 3}, 15);
  const Tensor r = rand_tensor({1, 6, 3, 3}, 16);
  auto loss = [&] { return sum(mul(sefn_forward(x, p), r)); };
  CHECK(max_rel_error(analytic_grad(loss, x), numeric_grad(loss, x)) < 1e-4);
  auto res2_loss = [&] {
    return sum(mul(res2_multiscale(x, p), r));
  };
  CHECK(max_rel_error(analytic_grad(res2_loss, x), numeric_grad(res2_loss, x)) < 1e-4);
  CHECK(max_rel_error(analytic_grad(loss, p.sa_conv.weight), numeric_grad(loss, p.sa_conv.weight)) <
        1e-4);
}
