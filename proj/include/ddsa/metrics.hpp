#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ddsa/tensor.hpp"

namespace ddsa {

/// Full-range BT.601 luma: [3,h,w] -> [1,h,w].
Tensor rgb_to_y(const Tensor& img);

inline constexpr double kPsnrCapDb = 99.0;

/// 10 log10(1 / MSE) for signals in [0,1]; identical inputs give kPsnrCapDb.
double psnr(const Tensor& a, const Tensor& b);

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01,
/// K2 0.03, L 1). Inputs [1,h,w] (or [h,w]) with h, w >= 11.
double ssim(const Tensor& a, const Tensor& b);

struct ImageMetrics {
  std::string image;
  double psnr_db;
  double ssim;
};

struct MetricReport {
  std::vector<ImageMetrics> rows;

  double mean_psnr() const;
  double mean_ssim() const;
  /// `image,psnr,ssim` header, one row per image, then a MEAN row.
  void write_csv(std::ostream& os) const;
};

/// Both metrics on the Y channel of two [3,h,w] RGB images.
ImageMetrics evaluate_pair(const std::string& name, const Tensor& derained, const Tensor& gt);

}  // namespace ddsa
