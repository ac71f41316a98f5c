#pragma once

#include <cstdint>
#include <vector>

#include "crfill/autograd.hpp"

namespace crfill {

enum class Activation { kIdentity, kElu, kLeakyRelu, kRelu, kTanh, kSigmoid };

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Output extent of a convolution along one axis.
inline int conv_output_size(int in, int kernel, const ConvOptions& o) {
  return (in + 2 * o.padding - o.dilation * (kernel - 1) - 1) / o.stride + 1;
}

/// Pins BLAS to one thread (deterministic reductions, stable timings) and keeps freed buffers on the heap.
void init_runtime();

// Row-major GEMM, C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc);

// ---- convolution --------------------------------------------------------

/// x: (N,Cin,H,W), weight: (Cout,Cin,kh,kw), bias: (Cout) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvOptions& options);

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset);

/// Multiplies by a constant. `c` either matches `a` or is (N,1,H,W) and broadcasts over channels.
template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c);

template <typename T>
Var<T> activate(const Var<T>& a, Activation act, T leaky_slope = T(0.2));

/// First half of the channels through `act`, second half through a sigmoid gate, multiplied.
template <typename T>
Var<T> gated_activation(const Var<T>& a, Activation act);

// ---- shape --------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& a);
/// Bilinear resize with half-pixel centres (align_corners = false).
template <typename T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w);
/// Zero-pads the bottom/right edges to (h, w).
template <typename T>
Var<T> pad_to(const Var<T>& a, int h, int w);
/// Symmetric zero padding of `p` cells on every spatial side.
template <typename T>
Var<T> pad_border(const Var<T>& a, int p);
/// Keeps rows [top, top+h) and cols [left, left+w).
template <typename T>
Var<T> crop(const Var<T>& a, int top, int left, int h, int w);
template <typename T>
Var<T> select_batch(const Var<T>& a, const std::vector<int>& indices);
template <typename T>
Var<T> detach(const Var<T>& a);

// ---- reductions ---------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
/// mean |a - b|
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b);
/// mean ReLU(1 - sign * scores); sign = +1 for "should be real", -1 for "should be fake".
template <typename T>
Var<T> hinge_mean(const Var<T>& scores, T sign);

// ---- batched matrices (N,R,C) ----------------------------------------------

template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b);
/// Divides each row of (N,P,D) by (||row|| + eps).
template <typename T>
Var<T> normalize_rows(const Var<T>& a, T eps);
/// Row softmax of (N,P,Q) restricted to columns with allowed[n][q] != 0; other entries are exactly 0.
/// Rows of items with no allowed column are all zero.
template <typename T>
Var<T> masked_softmax_rows(const Var<T>& logits, const std::vector<std::vector<std::uint8_t>>& allowed);

// ---- spectral normalisation -------------------------------------------

/// Power-iteration state for one weight matrix viewed as (rows, cols).
template <typename T>
struct SpectralState {
  Tensor<T> u;  // (rows)
  Tensor<T> v;  // (cols)
  T sigma = T(1);
};

/// W / sigma(W); with `update` runs one power-iteration step first. Gradient treats u, v as constants.
template <typename T>
Var<T> spectral_normalize(const Var<T>& weight, SpectralState<T>& state, bool update);

/// Largest singular value of a (rows, cols) matrix by many power iterations; a test and diagnostic helper.
template <typename T>
T spectral_norm_estimate(const Tensor<T>& matrix_rows_major, int rows, int cols, int iterations);

}  // namespace crfill
