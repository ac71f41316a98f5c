#pragma once

#include "crfill/tensor.hpp"

namespace crfill {

/// Reported when the images are identical.
inline constexpr double kPsnrCap = 100.0;

/// [-1,1] -> [0,1].
Tensor<float> to_unit_range(const Tensor<float>& image);

/// Mean absolute error over all elements.
double l1_error(const Tensor<float>& a, const Tensor<float>& b);
/// Mean absolute error over pixels with mask != 0 (all channels); 0 when the mask is empty.
double l1_error_masked(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& mask);

/// 10 log10(range^2 / MSE), capped at kPsnrCap.
double psnr(const Tensor<float>& a, const Tensor<float>& b, double range = 1.0);
double psnr_masked(const Tensor<float>& a, const Tensor<float>& b, const Tensor<float>& mask, double range = 1.0);

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region, averaged over batch and channels.
/// Inputs are (N,C,H,W) with H, W >= 11.
double ssim(const Tensor<float>& a, const Tensor<float>& b, double range = 1.0);

}  // namespace crfill
