#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ddsa/tensor.hpp"

namespace testing {

using ddsa::Shape;
using ddsa::Tensor;

inline Tensor rand_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(gen);
  return t;
}

inline Tensor from_values(Shape shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

/// Reverse-mode gradient of a scalar loss with respect to `leaf`.
inline std::vector<double> analytic_grad(const std::function<Tensor()>& loss, Tensor leaf) {
  leaf.set_requires_grad();
  leaf.zero_grad();
  ddsa::Tape tape;
  ddsa::TapeScope scope(tape);
  const Tensor l = loss();
  tape.backward(l);
  return {leaf.grad().begin(), leaf.grad().end()};
}

/// Central differences for every entry of `leaf`.
inline std::vector<double> numeric_grad(const std::function<Tensor()>& loss, Tensor leaf,
                                        double h = 1e-5) {
  std::vector<double> g(static_cast<std::size_t>(leaf.numel()));
  auto d = leaf.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = d[i];
    d[i] = orig + h;
    const double plus = loss().item();
    d[i] = orig - h;
    const double minus = loss().item();
    d[i] = orig;
    g[i] = (plus - minus) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const std::vector<double>& analytic,
                            const std::vector<double>& numeric) {
  double m = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    m = std::max(m, std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + 1e-8));
  }
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  auto p = std::filesystem::temp_directory_path() /
           ("ddsa_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
}

}  // namespace testing
