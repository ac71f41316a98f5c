#include "crfill/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

namespace crfill {

namespace {
constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

void require_pair(const Tensor<float>& a, const Tensor<float>& b, const char* what) { require_same_shape(a, b, what); }

void require_mask(const Tensor<float>& a, const Tensor<float>& mask, const char* what) {
  if (a.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != a.dim(0) || mask.dim(2) != a.dim(2) ||
      mask.dim(3) != a.dim(3)) {
    throw DimensionError(std::string(what) + ": mask " + to_string(mask.shape()) + " does not fit " +
                         to_string(a.shape()));
  }
}

double psnr_from_mse(double mse, double range) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(range * range / mse));
}

/// Sum of squared/absolute differences over masked pixels, and the number of masked values.
template <typename F>
std::pair<double, double> masked_sum(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& mask, F f) {
  const int n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  double s = 0, count = 0;
  for (int i = 0; i < n; ++i) {
    const float* m = mask.data() + static_cast<std::size_t>(i) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (int p = 0; p < hw; ++p) {
        if (m[p] == 0.0f) continue;
        s += f(static_cast<double>(a.data()[off + p]) - b.data()[off + p]);
        count += 1;
      }
    }
  }
  return {s, count};
}
}  // namespace

Tensor<float> to_unit_range(const Tensor<float>& image) {
  Tensor<float> out = image;
  for (auto& v : out.storage()) v = (v + 1.0f) * 0.5f;
  return out;
}

double l1_error(const Tensor<float>& a, const Tensor<float>& b) {
  require_pair(a, b, "l1_error");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

double l1_error_masked(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& mask) {
  require_pair(a, b, "l1_error_masked");
  require_mask(a, mask, "l1_error_masked");
  auto [s, n] = masked_sum(a, b, mask, [](double d) { return std::abs(d); });
  return n > 0 ? s / n : 0.0;
}

double psnr(const Tensor<float>& a, const Tensor<float>& b, double range) {
  require_pair(a, b, "psnr");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return psnr_from_mse(a.size() ? s / static_cast<double>(a.size()) : 0.0, range);
}

double psnr_masked(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& mask, double range) {
  require_pair(a, b, "psnr_masked");
  require_mask(a, mask, "psnr_masked");
  auto [s, n] = masked_sum(a, b, mask, [](double d) { return d * d; });
  return psnr_from_mse(n > 0 ? s / n : 0.0, range);
}

double ssim(const Tensor<float>& a, const Tensor<float>& b, double range) {
  require_pair(a, b, "ssim");
  if (a.rank() != 4 || a.dim(2) < kWindow || a.dim(3) < kWindow) {
    throw DimensionError("ssim: expected (N,C,H,W) with H, W >= 11, got " + to_string(a.shape()));
  }
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  const int h = a.dim(2), w = a.dim(3), planes = a.dim(0) * a.dim(1);
  const cv::Mat kernel = cv::getGaussianKernel(kWindow, kSigma, CV_64F);
  const int r = kWindow / 2;
  const cv::Rect valid(r, r, w - 2 * r, h - 2 * r);
  auto blur = [&](const cv::Mat& m) {
    cv::Mat out;
    cv::sepFilter2D(m, out, CV_64F, kernel, kernel, cv::Point(-1, -1), 0, cv::BORDER_CONSTANT);
    return cv::Mat(out, valid);
  };
  double total = 0;
  for (int p = 0; p < planes; ++p) {
    cv::Mat x(h, w, CV_64F), y(h, w, CV_64F);
    const float* pa = a.data() + static_cast<std::size_t>(p) * h * w;
    const float* pb = b.data() + static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < h * w; ++i) {
      x.at<double>(i / w, i % w) = pa[i];
      y.at<double>(i / w, i % w) = pb[i];
    }
    const cv::Mat mx = blur(x), my = blur(y);
    const cv::Mat sxx = blur(x.mul(x)) - mx.mul(mx);
    const cv::Mat syy = blur(y.mul(y)) - my.mul(my);
    const cv::Mat sxy = blur(x.mul(y)) - mx.mul(my);
    cv::Mat num = (2 * mx.mul(my) + c1).mul(2 * sxy + c2);
    cv::Mat den = (mx.mul(mx) + my.mul(my) + c1).mul(sxx + syy + c2);
    cv::Mat map;
    cv::divide(num, den, map);
    total += cv::mean(map)[0];
  }
  return total / planes;
}

}  // namespace crfill
