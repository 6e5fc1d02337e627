#include "doctest.h"

#include <cmath>

#include "ddsa/ops.hpp"
#include "ddsa/tensor.hpp"
#include "support.hpp"

using namespace ddsa;
using testing::analytic_grad;
using testing::from_values;
using testing::max_rel_error;
using testing::numeric_grad;
using testing::rand_tensor;

TEST_CASE("matmul hand example") {
  const Tensor a = from_values({2, 2}, {1, 2, 3, 4});
  const Tensor b = from_values({2, 2}, {5, 6, 7, 8});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at({0, 0}) == 19);
  CHECK(c.at({0, 1}) == 22);
  CHECK(c.at({1, 0}) == 43);
  CHECK(c.at({1, 1}) == 50);
}

TEST_CASE("matmul identity and shape errors") {
  const Tensor eye = from_values({2, 2}, {1, 0, 0, 1});
  CHECK(testing::bitwise_equal(matmul(eye, eye), eye));
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor({2, 2, 3}), Tensor({3, 3, 2})), ShapeError);
}

TEST_CASE("batched matmul matches per-batch products") {
  const Tensor a = rand_tensor({3, 2, 4}, 1), b = rand_tensor({3, 4, 5}, 2);
  const Tensor c = matmul(a, b);
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t i = 0; i < 2; ++i)
      for (std::int64_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::int64_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, k, j});
        CHECK(c.at({n, i, j}) == doctest::Approx(s).epsilon(1e-14));
      }
}

TEST_CASE("matmul gradient matches finite differences") {
  const Tensor a = rand_tensor({3, 4}, 3), b = rand_tensor({4, 2}, 4);
  auto loss = [&] { return sum(matmul(a, b)); };
  CHECK(max_rel_error(analytic_grad(loss, a), numeric_grad(loss, a)) < 1e-6);
  CHECK(max_rel_error(analytic_grad(loss, b), numeric_grad(loss, b)) < 1e-6);
}

TEST_CASE("softmax closed forms") {
  const Tensor u = softmax_rows(Tensor({1, 3}, 0.0));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  MaskedScores m{from_values({1, 3}, {1.0, 123.0, 0.0}), {1, 0, 1}};
  const Tensor s = softmax_rows(m);
  const double e = std::exp(1.0);
  CHECK(s.at({0, 0}) == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
  CHECK(s.at({0, 1}) == 0.0);
  CHECK(s.at({0, 2}) == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
  CHECK(s.at({0, 0}) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(s.at({0, 2}) == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("softmax is shift invariant and row-stochastic") {
  const Tensor x = rand_tensor({4, 7}, 5, -3, 3);
  const Tensor a = softmax_rows(x);
  const Tensor b = softmax_rows(add_scalar(x, 17.25));
  CHECK(testing::max_abs_diff(a, b) < 1e-12);
  for (std::int64_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::int64_t c = 0; c < 7; ++c) s += a.at({r, c});
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // large values stay finite
  const Tensor big = softmax_rows(from_values({1, 2}, {1000.0, 999.0}));
  CHECK(std::isfinite(big.at({0, 0})));
}

TEST_CASE("all-masked row is an error") {
  MaskedScores m{from_values({2, 2}, {1, 2, 3, 4}), {1, 1, 0, 0}};
  CHECK_THROWS(softmax_rows(m));
}

TEST_CASE("backward of sum(x^2)") {
  Tensor x = from_values({3}, {1, 2, 3});
  const auto g = analytic_grad([&] { return sum(mul(x, x)); }, x);
  CHECK(g == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward of sum(x) is all ones") {
  Tensor x = rand_tensor({2, 3, 4}, 6);
  for (double v : analytic_grad([&] { return sum(x); }, x)) CHECK(v == 1.0);
}

TEST_CASE("backward twice raises") {
  Tensor x = from_values({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  const Tensor l = sum(mul(x, x));
  tape.backward(l);
  CHECK(tape.consumed());
  CHECK_THROWS(tape.backward(l));
  tape.reset();
  CHECK_FALSE(tape.consumed());
}

TEST_CASE("non-scalar loss raises") {
  Tensor x = from_values({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS(tape.backward(mul(x, x)));
}

TEST_CASE("inference mode records nothing") {
  Tensor x = from_values({2}, {1, 2});
  x.set_requires_grad();
  CHECK(active_tape() == nullptr);
  const Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  {
    TapeScope scope(tape);
    CHECK(active_tape() == &tape);
    (void)sum(from_values({2}, {3, 4}));  // no grad inputs
    CHECK(tape.size() == 0);
    (void)sum(mul(x, x));
    CHECK(tape.size() == 2);
  }
  CHECK(active_tape() == nullptr);
}

TEST_CASE("gradients accumulate over repeated use") {
  Tensor x = from_values({2}, {0.5, -1.5});
  // d/dx (x*x + 3x) = 2x + 3
  const auto g = analytic_grad([&] { return sum(add(mul(x, x), scale(x, 3.0))); }, x);
  CHECK(g[0] == doctest::Approx(4.0));
  CHECK(g[1] == doctest::Approx(0.0));
}

TEST_CASE("elementwise shape mismatch raises") {
  CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  CHECK_THROWS_AS(mul(Tensor({2}), Tensor({3})), ShapeError);
}

TEST_CASE("layout ops") {
  const Tensor x = from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(x, 0, 1);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 1}) == 6);
  CHECK(t.at({0, 1}) == 4);
  CHECK(reshape(x, {3, 2}).at({1, 0}) == 3);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
  const Tensor c = concat({x, x}, 0);
  CHECK(c.shape() == Shape{4, 3});
  CHECK(c.at({3, 2}) == 6);
  const Tensor s = slice(x, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.at({1, 0}) == 5);
  const auto parts = split(c, 0, 2);
  CHECK(testing::bitwise_equal(parts[1], x));
  CHECK(flip(x, 1).at({0, 0}) == 3);
  CHECK(testing::bitwise_equal(flip(flip(x, 0), 0), x));
  const Tensor e = expand(from_values({2, 1}, {1, 2}), 1, 3);
  CHECK(e.at({1, 2}) == 2);
  CHECK(sum_axis(x, 1).at({1, 0}) == 15);
  CHECK(mean_axis(x, 0).at({0, 2}) == 4.5);
  CHECK(max_axis(x, 1).at({0, 0}) == 3);
}

TEST_CASE("op gradients match finite differences") {
  Tensor x = rand_tensor({2, 3, 4}, 9, 0.2, 1.5);
  const Tensor w = rand_tensor({4, 2, 3}, 10);
  const Tensor w2 = rand_tensor({2, 3, 4}, 11);
  std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"transpose+reshape", [&] { return sum(mul(reshape(transpose(x, 0, 2), {4, 2, 3}), w)); }},
      {"concat+slice", [&] { return sum(mul(slice(concat({x, exp(x)}, 1), 1, 2, 3), w2)); }},
      {"split", [&] {
         auto p = split(x, 2, 2);
         return sum(mul(concat({p[1], p[0]}, 2), w2));
       }},
      {"flip", [&] { return sum(mul(flip(x, 2), w2)); }},
      {"log+pow", [&] { return sum(mul(log(pow(x, 1.7)), w2)); }},
      {"abs", [&] { return sum(mul(abs(add_scalar(x, -0.8)), w2)); }},
      {"gelu+sigmoid", [&] { return sum(mul(gelu(sigmoid(x)), w2)); }},
      {"mean_axis+expand", [&] { return sum(mul(expand(mean_axis(x, 1), 1, 3), w2)); }},
      {"max_axis", [&] { return sum(mul(expand(max_axis(x, 2), 2, 4), w2)); }},
      {"sum_axis+mean", [&] { return mean(mul(sum_axis(mul(x, w2), 0), sum_axis(w2, 0))); }},
      {"scale_by", [&] { return sum(scale_by(mul(x, w2), slice(reshape(x, {24}), 0, 5, 1))); }},
      {"softmax", [&] { return sum(mul(softmax_rows(x), w2)); }},
  };
  for (const auto& [name, loss] : cases) {
    CAPTURE(name);
    CHECK(max_rel_error(analytic_grad(loss, x), numeric_grad(loss, x)) < 1e-6);
  }
}

TEST_CASE("masked softmax gradient skips dropped entries") {
  Tensor x = rand_tensor({2, 4}, 12);
  const Tensor w = rand_tensor({2, 4}, 13);
  const std::vector<std::uint8_t> keep{1, 0, 1, 1, 0, 1, 1, 0};
  auto loss = [&] { return sum(mul(softmax_rows(MaskedScores{x, keep}), w)); };
  const auto g = analytic_grad(loss, x);
  CHECK(g[1] == 0.0);
  CHECK(g[4] == 0.0);
  CHECK(g[7] == 0.0);
  CHECK(max_rel_error(g, numeric_grad(loss, x)) < 1e-6);
}

TEST_CASE("detach copies without grad") {
  Tensor x = from_values({2}, {1, 2});
  x.set_requires_grad();
  const Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK_FALSE(d.same_storage(x));
  CHECK(testing::bitwise_equal(d, x));
}
