#include "ddsa/metrics.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstdio>

namespace ddsa {

namespace {

using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Image as_plane(const Tensor& t, const char* what) {
  std::int64_t h = 0, w = 0;
  if (t.rank() == 3 && t.dim(0) == 1) {
    h = t.dim(1);
    w = t.dim(2);
  } else if (t.rank() == 2) {
    h = t.dim(0);
    w = t.dim(1);
  } else {
    throw ShapeError(std::string(what) + ": expected a [1,h,w] plane, got " + shape_str(t.shape()));
  }
  return Eigen::Map<const Image>(t.data().data(), h, w);
}

Eigen::VectorXd gaussian_window(int size, double sigma) {
  Eigen::VectorXd g(size);
  const int half = size / 2;
  for (int i = 0; i < size; ++i) {
    const double d = i - half;
    g[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
  }
  return g / g.sum();
}

// Separable 'valid' filtering with a symmetric 1-D kernel.
Image filter_valid(const Image& x, const Eigen::VectorXd& k) {
  const Eigen::Index n = k.size();
  const Eigen::Index oh = x.rows() - n + 1, ow = x.cols() - n + 1;
  Image rows_done = Image::Zero(x.rows(), ow);
  for (Eigen::Index j = 0; j < n; ++j) rows_done += k[j] * x.middleCols(j, ow);
  Image out = Image::Zero(oh, ow);
  for (Eigen::Index i = 0; i < n; ++i) out += k[i] * rows_done.middleRows(i, oh);
  return out;
}

}  // namespace

Tensor rgb_to_y(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("rgb_to_y expects [3,h,w], got " + shape_str(img.shape()));
  }
  const std::int64_t plane = img.dim(1) * img.dim(2);
  const auto d = img.data();
  Tensor y(Shape{1, img.dim(1), img.dim(2)});
  auto out = y.mutable_data();
  for (std::int64_t i = 0; i < plane; ++i) {
    const auto u = static_cast<std::size_t>(i);
    out[u] = 0.299 * d[u] + 0.587 * d[u + plane] + 0.114 * d[u + 2 * plane];
  }
  return y;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto x = a.data();
  const auto y = b.data();
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - y[i]) * (x[i] - y[i]);
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Image x = as_plane(a, "ssim");
  const Image y = as_plane(b, "ssim");
  constexpr int win = 11;
  if (x.rows() < win || x.cols() < win) {
    throw ShapeError("ssim: images must be at least 11x11, got " + shape_str(a.shape()));
  }
  const Eigen::VectorXd g = gaussian_window(win, 1.5);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Image mu_x = filter_valid(x, g);
  const Image mu_y = filter_valid(y, g);
  const Image sxx = filter_valid(x * x, g) - mu_x * mu_x;
  const Image syy = filter_valid(y * y, g) - mu_y * mu_y;
  const Image sxy = filter_valid(x * y, g) - mu_x * mu_y;
  const Image map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)) /
                    ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean();
}

double MetricReport::mean_psnr() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.psnr_db;
  return s / static_cast<double>(rows.size());
}

double MetricReport::mean_ssim() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.ssim;
  return s / static_cast<double>(rows.size());
}

void MetricReport::write_csv(std::ostream& os) const {
  char buf[128];
  os << "image,psnr,ssim\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.psnr_db, r.ssim);
    os << r.image << buf;
  }
  std::snprintf(buf, sizeof buf, "MEAN,%.17g,%.17g\n", mean_psnr(), mean_ssim());
  os << buf;
}

ImageMetrics evaluate_pair(const std::string& name, const Tensor& derained, const Tensor& gt) {
  const Tensor ya = rgb_to_y(derained);
  const Tensor yb = rgb_to_y(gt);
  return {name, psnr(ya, yb), ssim(ya, yb)};
}

}  // namespace ddsa
