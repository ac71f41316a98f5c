#include <doctest.h>

#include <cmath>
#include <random>

#include "crfill/metrics.hpp"
#include "support/oracles.hpp"

using namespace crfill;

namespace {

// Direct windowed SSIM: normalised 11x11 Gaussian weights, every full window, averaged.
double ssim_oracle(const Tensor<float>& a, const Tensor<float>& b, double range) {
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) {
    g[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
    gs += g[i];
  }
  for (double& v : g) v /= gs;
  const double c1 = 1e-4 * range * range, c2 = 9e-4 * range * range;
  const int h = a.dim(2), w = a.dim(3);
  double total = 0;
  int planes = 0;
  for (int n = 0; n < a.dim(0); ++n) {
    for (int c = 0; c < a.dim(1); ++c, ++planes) {
      double plane = 0;
      for (int y = 0; y + 11 <= h; ++y) {
        for (int x = 0; x + 11 <= w; ++x) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (int i = 0; i < 11; ++i) {
            for (int j = 0; j < 11; ++j) {
              const double k = g[i] * g[j];
              const double p = a.at(n, c, y + i, x + j), q = b.at(n, c, y + i, x + j);
              mx += k * p;
              my += k * q;
              xx += k * p * p;
              yy += k * q * q;
              xy += k * p * q;
            }
          }
          const double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
          plane += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
      }
      total += plane / ((h - 10) * (w - 10));
    }
  }
  return total / planes;
}

}  // namespace

TEST_CASE("PSNR examples") {
  Tensor<float> a({1, 3, 8, 8}, 0.25f);
  Tensor<float> b = a;
  for (auto& v : b.storage()) v += 0.1f;
  CHECK(std::abs(psnr(a, b) - 20.0) < 1e-5);
  CHECK(std::abs(psnr(a, b, 2.0) - (20.0 + 20.0 * std::log10(2.0))) < 1e-5);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(l1_error(a, b) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK_THROWS_AS(psnr(a, Tensor<float>({1, 3, 8, 9})), DimensionError);
}

TEST_CASE("masked errors see only the hole") {
  std::mt19937_64 rng(31);
  auto a = oracle::random_tensor<float>({2, 3, 12, 12}, rng);
  auto b = oracle::random_tensor<float>({2, 3, 12, 12}, rng);
  auto m = oracle::random_mask<float>(2, 12, 12, 0.3, rng);
  double l1 = 0, se = 0, count = 0;
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 12; ++y) {
        for (int x = 0; x < 12; ++x) {
          if (m.at(n, 0, y, x) == 0.0f) continue;
          const double d = static_cast<double>(a.at(n, c, y, x)) - b.at(n, c, y, x);
          l1 += std::abs(d);
          se += d * d;
          count += 1;
        }
      }
    }
  }
  CHECK(std::abs(l1_error_masked(a, b, m) - l1 / count) < 1e-12);
  CHECK(std::abs(psnr_masked(a, b, m) - 10 * std::log10(1.0 / (se / count))) < 1e-9);
  CHECK(l1_error_masked(a, b, Tensor<float>({2, 1, 12, 12})) == 0.0);
  CHECK(psnr_masked(a, b, Tensor<float>({2, 1, 12, 12})) == kPsnrCap);
  CHECK_THROWS_AS(l1_error_masked(a, b, Tensor<float>({2, 3, 12, 12})), DimensionError);

  // Known pixels do not count, whatever they hold.
  auto c = a;
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 12; ++y) {
      for (int x = 0; x < 12; ++x) {
        if (m.at(n, 0, y, x) == 0.0f) c.at(n, 1, y, x) = 5.0f;
      }
    }
  }
  CHECK(l1_error_masked(c, b, m) == l1_error_masked(a, b, m));
}

TEST_CASE("SSIM") {
  std::mt19937_64 rng(32);
  auto a = to_unit_range(oracle::random_tensor<float>({1, 3, 32, 32}, rng));
  auto b = to_unit_range(oracle::random_tensor<float>({1, 3, 32, 32}, rng));
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-9);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) < 0.5);

  auto near = a;
  std::normal_distribution<float> noise(0.0f, 0.02f);
  for (auto& v : near.storage()) v += noise(rng);
  CHECK(std::abs(ssim(a, near) - ssim_oracle(a, near, 1.0)) < 1e-5);
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b, 1.0)) < 1e-5);
  CHECK(ssim(a, near) > ssim(a, b));

  auto two = oracle::random_tensor<float>({2, 1, 16, 13}, rng);
  auto other = oracle::random_tensor<float>({2, 1, 16, 13}, rng);
  CHECK(std::abs(ssim(two, other, 2.0) - ssim_oracle(two, other, 2.0)) < 1e-5);
  CHECK_THROWS_AS(ssim(Tensor<float>({1, 1, 10, 20}), Tensor<float>({1, 1, 10, 20})), DimensionError);
}

TEST_CASE("unit range mapping") {
  Tensor<float> t({3}, {-1.0f, 0.0f, 1.0f});
  CHECK(to_unit_range(t) == Tensor<float>({3}, {0.0f, 0.5f, 1.0f}));
}
