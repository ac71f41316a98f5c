#include "crfill/ops.hpp"

#include <cblas.h>
#include <malloc.h>

#include <cmath>
#include <limits>
#include <memory>

namespace crfill {

void init_runtime() {
  openblas_set_num_threads(1);
  // Large activation buffers are freed and reallocated every step; keeping them on the heap avoids an
  // mmap/munmap pair (and page faults) per buffer.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

template <>
void gemm<float>(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

namespace {

template <typename T>
void require_nchw(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) throw DimensionError(std::string(what) + ": expected NCHW, got " + to_string(t.shape()));
}

struct ConvGeometry {
  int channels, height, width, kh, kw, out_h, out_w;
  ConvOptions o;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        const int shift = j * g.o.dilation - g.o.padding;
        // Output columns whose input column is inside the map.
        int lo = 0, hi = g.out_w;
        if (g.o.stride == 1) {
          lo = std::clamp(-shift, 0, g.out_w);
          hi = std::clamp(g.width - shift, lo, g.out_w);
        }
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.o.stride - g.o.padding + i * g.o.dilation;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(ih) * g.width;
          if (g.o.stride == 1) {
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + g.out_w, T(0));
            continue;
          }
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.o.stride + shift;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        const int shift = j * g.o.dilation - g.o.padding;
        int lo = 0, hi = g.out_w;
        if (g.o.stride == 1) {
          lo = std::clamp(-shift, 0, g.out_w);
          hi = std::clamp(g.width - shift, lo, g.out_w);
        }
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.o.stride - g.o.padding + i * g.o.dilation;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = xc + static_cast<std::size_t>(ih) * g.width;
          if (g.o.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow + shift] += src[ow];
            continue;
          }
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.o.stride + shift;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
T apply_act(T x, Activation act, T slope) {
  switch (act) {
    case Activation::kIdentity: return x;
    case Activation::kElu: return x > T(0) ? x : std::expm1(x);
    case Activation::kLeakyRelu: return x > T(0) ? x : slope * x;
    case Activation::kRelu: return x > T(0) ? x : T(0);
    case Activation::kTanh: return std::tanh(x);
    case Activation::kSigmoid: return T(1) / (T(1) + std::exp(-x));
  }
  return x;
}

// Derivative expressed through the pre-activation x and output y.
template <typename T>
T act_grad(T x, T y, Activation act, T slope) {
  switch (act) {
    case Activation::kIdentity: return T(1);
    case Activation::kElu: return x > T(0) ? T(1) : y + T(1);
    case Activation::kLeakyRelu: return x > T(0) ? T(1) : slope;
    case Activation::kRelu: return x > T(0) ? T(1) : T(0);
    case Activation::kTanh: return T(1) - y * y;
    case Activation::kSigmoid: return y * (T(1) - y);
  }
  return T(1);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

// ---- convolution --------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvOptions& options) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  require_nchw(xv, "conv2d input");
  require_nchw(wv, "conv2d weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(xv.dim(1)) + " channels, weight expects " +
                         std::to_string(wv.dim(1)));
  }
  if (options.stride < 1 || options.dilation < 1 || options.padding < 0) {
    throw DimensionError("conv2d: invalid stride/dilation/padding");
  }
  ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), 0, 0, options};
  g.out_h = conv_output_size(g.height, g.kh, options);
  g.out_w = conv_output_size(g.width, g.kw, options);
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw DimensionError("conv2d: input " + to_string(xv.shape()) + " smaller than kernel footprint");
  }
  const int batch = xv.dim(0);
  const int cout = wv.dim(0);
  const int k = g.channels * g.kh * g.kw;
  const int plane = g.out_h * g.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;

  // Every element is written by im2col, so the buffer is left uninitialised.
  std::shared_ptr<T[]> cols(new T[static_cast<std::size_t>(batch) * k * plane]);
  Tensor<T> out({batch, cout, g.out_h, g.out_w});
  for (int n = 0; n < batch; ++n) {
    T* col = cols.get() + static_cast<std::size_t>(n) * k * plane;
    im2col(xv.data() + n * in_stride, g, col);
    T* on = out.data() + static_cast<std::size_t>(n) * cout * plane;
    gemm<T>(false, false, cout, plane, k, T(1), wv.data(), k, col, plane, T(0), on, plane);
    if (bias.defined()) {
      const T* bv = bias.value().data();
      for (int c = 0; c < cout; ++c) {
        T* row = on + static_cast<std::size_t>(c) * plane;
        for (int p = 0; p < plane; ++p) row[p] += bv[c];
      }
    }
  }
  if (!grad_mode_enabled()) cols.reset();

  return make_result<T>(std::move(out), {x, weight, bias}, [g, cols, batch, cout, k, plane, in_stride](Node<T>& self) {
    const Tensor<T>& dout = self.grad;
    const Tensor<T>& w = self.inputs[1]->value;
    for (int n = 0; n < batch; ++n) {
      const T* dn = dout.data() + static_cast<std::size_t>(n) * cout * plane;
      const T* col = cols.get() + static_cast<std::size_t>(n) * k * plane;
      if (self.input_needs_grad(1)) {
        gemm<T>(false, true, cout, k, plane, T(1), dn, plane, col, plane, T(1),
                self.inputs[1]->grad_buffer().data(), k);
      }
      if (self.input_needs_grad(2)) {
        T* db = self.inputs[2]->grad_buffer().data();
        for (int c = 0; c < cout; ++c) {
          const T* row = dn + static_cast<std::size_t>(c) * plane;
          T acc = 0;
          for (int p = 0; p < plane; ++p) acc += row[p];
          db[c] += acc;
        }
      }
      if (self.input_needs_grad(0)) {
        std::unique_ptr<T[]> dcol(new T[static_cast<std::size_t>(k) * plane]);
        gemm<T>(true, false, k, plane, cout, T(1), w.data(), k, dn, plane, T(0), dcol.get(), plane);
        col2im_add(dcol.get(), g, self.inputs[0]->grad_buffer().data() + n * in_stride);
      }
    }
  });
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.input_needs_grad(k)) continue;
      T* g = self.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.input_needs_grad(0)) {
      T* g = self.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (self.input_needs_grad(1)) {
      T* g = self.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    if (self.input_needs_grad(0)) {
      T* g = self.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.input_needs_grad(1)) {
      T* g = self.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += offset;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  const Tensor<T>& av = a.value();
  bool broadcast = false;
  if (!av.same_shape(c)) {
    if (av.rank() == 4 && c.rank() == 4 && c.dim(1) == 1 && c.dim(0) == av.dim(0) && c.dim(2) == av.dim(2) &&
        c.dim(3) == av.dim(3)) {
      broadcast = true;
    } else {
      throw DimensionError("mul_const: shape mismatch " + to_string(av.shape()) + " vs " + to_string(c.shape()));
    }
  }
  auto factor = [broadcast, &av, &c](std::size_t i) -> T {
    if (!broadcast) return c[i];
    const std::size_t plane = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
    const std::size_t n = i / (plane * av.dim(1));
    return c[n * plane + i % plane];
  };
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor(i);
  auto saved = std::make_shared<Tensor<T>>(c);
  return make_result<T>(std::move(out), {a}, [saved, broadcast](Node<T>& self) {
    const Tensor<T>& cv = *saved;
    const Tensor<T>& in = self.inputs[0]->value;
    T* g = self.inputs[0]->grad_buffer().data();
    if (!broadcast) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * cv[i];
      return;
    }
    const std::size_t plane = static_cast<std::size_t>(in.dim(2)) * in.dim(3);
    const std::size_t chans = static_cast<std::size_t>(in.dim(1));
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t n = i / (plane * chans);
      g[i] += self.grad[i] * cv[n * plane + i % plane];
    }
  });
}

template <typename T>
Var<T> activate(const Var<T>& a, Activation act, T leaky_slope) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = apply_act(v, act, leaky_slope);
  return make_result<T>(std::move(out), {a}, [act, leaky_slope](Node<T>& self) {
    const T* x = self.inputs[0]->value.data();
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * act_grad(x[i], self.value[i], act, leaky_slope);
    }
  });
}

template <typename T>
Var<T> gated_activation(const Var<T>& a, Activation act) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "gated_activation");
  if (av.dim(1) % 2 != 0) throw DimensionError("gated_activation: channel count must be even");
  const int batch = av.dim(0), half = av.dim(1) / 2;
  const std::size_t block = static_cast<std::size_t>(half) * av.dim(2) * av.dim(3);
  Tensor<T> out({batch, half, av.dim(2), av.dim(3)});
  for (int n = 0; n < batch; ++n) {
    const T* f = av.data() + 2 * n * block;
    const T* gt = f + block;
    T* o = out.data() + n * block;
    for (std::size_t i = 0; i < block; ++i) o[i] = apply_act(f[i], act, T(0.2)) * sigmoid(gt[i]);
  }
  return make_result<T>(std::move(out), {a}, [act, batch, block](Node<T>& self) {
    const T* in = self.inputs[0]->value.data();
    T* g = self.inputs[0]->grad_buffer().data();
    for (int n = 0; n < batch; ++n) {
      const T* f = in + 2 * n * block;
      const T* gt = f + block;
      T* df = g + 2 * n * block;
      T* dg = df + block;
      const T* dy = self.grad.data() + n * block;
      for (std::size_t i = 0; i < block; ++i) {
        const T fy = apply_act(f[i], act, T(0.2));
        const T s = sigmoid(gt[i]);
        df[i] += dy[i] * s * act_grad(f[i], fy, act, T(0.2));
        dg[i] += dy[i] * fy * s * (T(1) - s);
      }
    }
  });
}

// ---- shape --------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: nothing to concatenate");
  const Tensor<T>& first = parts.front().value();
  require_nchw(first, "concat_channels");
  const int batch = first.dim(0), h = first.dim(2), w = first.dim(3);
  int channels = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    require_nchw(v, "concat_channels");
    if (v.dim(0) != batch || v.dim(2) != h || v.dim(3) != w) {
      throw DimensionError("concat_channels: mismatched " + to_string(v.shape()) + " vs " + to_string(first.shape()));
    }
    channels += v.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({batch, channels, h, w});
  for (int n = 0; n < batch; ++n) {
    T* dst = out.data() + n * channels * plane;
    for (const auto& p : parts) {
      const std::size_t len = static_cast<std::size_t>(p.dim(1)) * plane;
      const T* src = p.value().data() + n * len;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  return make_result<T>(std::move(out), parts, [batch, channels, plane](Node<T>& self) {
    for (int n = 0; n < batch; ++n) {
      const T* src = self.grad.data() + n * channels * plane;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        const std::size_t len = static_cast<std::size_t>(self.inputs[k]->value.dim(1)) * plane;
        if (self.input_needs_grad(k)) {
          T* dst = self.inputs[k]->grad_buffer().data() + n * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        src += len;
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "upsample_nearest2x");
  const int nc = av.dim(0) * av.dim(1), h = av.dim(2), w = av.dim(3);
  Tensor<T> out({av.dim(0), av.dim(1), 2 * h, 2 * w});
  for (int p = 0; p < nc; ++p) {
    const T* src = av.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < 2 * w; ++x) dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
    }
  }
  return make_result<T>(std::move(out), {a}, [nc, h, w](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (int p = 0; p < nc; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * 4 * h * w;
      T* dst = g + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < 2 * h; ++y) {
        for (int x = 0; x < 2 * w; ++x) dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
      }
    }
  });
}

namespace {
struct LerpTap {
  int i0, i1;
  double frac;
};

std::vector<LerpTap> bilinear_taps(int in, int out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace

template <typename T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "resize_bilinear");
  if (out_h <= 0 || out_w <= 0) throw DimensionError("resize_bilinear: non-positive output size");
  const int nc = av.dim(0) * av.dim(1), h = av.dim(2), w = av.dim(3);
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  Tensor<T> out({av.dim(0), av.dim(1), out_h, out_w});
  for (int p = 0; p < nc; ++p) {
    const T* src = av.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& vy = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& vx = tx[static_cast<std::size_t>(x)];
        const T top = src[vy.i0 * w + vx.i0] * T(1 - vx.frac) + src[vy.i0 * w + vx.i1] * T(vx.frac);
        const T bot = src[vy.i1 * w + vx.i0] * T(1 - vx.frac) + src[vy.i1 * w + vx.i1] * T(vx.frac);
        dst[y * out_w + x] = top * T(1 - vy.frac) + bot * T(vy.frac);
      }
    }
  }
  return make_result<T>(std::move(out), {a}, [nc, h, w, out_h, out_w, ty, tx](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (int p = 0; p < nc; ++p) {
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
      T* dst = g + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < out_h; ++y) {
        const auto& vy = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
          const auto& vx = tx[static_cast<std::size_t>(x)];
          const T d = src[y * out_w + x];
          dst[vy.i0 * w + vx.i0] += d * T((1 - vy.frac) * (1 - vx.frac));
          dst[vy.i0 * w + vx.i1] += d * T((1 - vy.frac) * vx.frac);
          dst[vy.i1 * w + vx.i0] += d * T(vy.frac * (1 - vx.frac));
          dst[vy.i1 * w + vx.i1] += d * T(vy.frac * vx.frac);
        }
      }
    }
  });
}

namespace {
// Copies the window [top, top+h) x [left, left+w) of `in` into `out` placed at (dst_top, dst_left).
template <typename T>
void copy_window(const Tensor<T>& in, int src_top, int src_left, Tensor<T>& out, int dst_top, int dst_left,
                 int h, int w, bool accumulate) {
  const int nc = in.dim(0) * in.dim(1);
  const int ih = in.dim(2), iw = in.dim(3), oh = out.dim(2), ow = out.dim(3);
  for (int p = 0; p < nc; ++p) {
    const T* src = in.data() + static_cast<std::size_t>(p) * ih * iw;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < h; ++y) {
      const T* s = src + (src_top + y) * iw + src_left;
      T* d = dst + (dst_top + y) * ow + dst_left;
      for (int x = 0; x < w; ++x) {
        if (accumulate) {
          d[x] += s[x];
        } else {
          d[x] = s[x];
        }
      }
    }
  }
}
}  // namespace

template <typename T>
Var<T> pad_to(const Var<T>& a, int h, int w) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "pad_to");
  if (h < av.dim(2) || w < av.dim(3)) throw DimensionError("pad_to: target smaller than input");
  if (h == av.dim(2) && w == av.dim(3)) return a;
  Tensor<T> out({av.dim(0), av.dim(1), h, w});
  copy_window(av, 0, 0, out, 0, 0, av.dim(2), av.dim(3), false);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    copy_window(self.grad, 0, 0, g, 0, 0, g.dim(2), g.dim(3), true);
  });
}

template <typename T>
Var<T> pad_border(const Var<T>& a, int p) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "pad_border");
  if (p < 0) throw DimensionError("pad_border: negative padding");
  if (p == 0) return a;
  Tensor<T> out({av.dim(0), av.dim(1), av.dim(2) + 2 * p, av.dim(3) + 2 * p});
  copy_window(av, 0, 0, out, p, p, av.dim(2), av.dim(3), false);
  return make_result<T>(std::move(out), {a}, [p](Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    copy_window(self.grad, p, p, g, 0, 0, g.dim(2), g.dim(3), true);
  });
}

template <typename T>
Var<T> crop(const Var<T>& a, int top, int left, int h, int w) {
  const Tensor<T>& av = a.value();
  require_nchw(av, "crop");
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > av.dim(2) || left + w > av.dim(3)) {
    throw DimensionError("crop: window outside " + to_string(av.shape()));
  }
  if (top == 0 && left == 0 && h == av.dim(2) && w == av.dim(3)) return a;
  Tensor<T> out({av.dim(0), av.dim(1), h, w});
  copy_window(av, top, left, out, 0, 0, h, w, false);
  return make_result<T>(std::move(out), {a}, [top, left, h, w](Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    copy_window(self.grad, 0, 0, g, top, left, h, w, true);
  });
}

template <typename T>
Var<T> select_batch(const Var<T>& a, const std::vector<int>& indices) {
  const Tensor<T>& av = a.value();
  if (av.rank() < 1) throw DimensionError("select_batch: scalar input");
  const std::size_t item = av.size() / static_cast<std::size_t>(av.dim(0));
  Shape s = av.shape();
  s[0] = static_cast<int>(indices.size());
  Tensor<T> out(s);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int n = indices[k];
    if (n < 0 || n >= av.dim(0)) throw DimensionError("select_batch: index out of range");
    std::copy(av.data() + n * item, av.data() + (n + 1) * item, out.data() + k * item);
  }
  return make_result<T>(std::move(out), {a}, [indices, item](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const T* src = self.grad.data() + k * item;
      T* dst = g + static_cast<std::size_t>(indices[k]) * item;
      for (std::size_t i = 0; i < item; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value());
}

// ---- reductions ---------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    for (auto& v : g.storage()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  double acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), {a}, [n](Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    const T d = self.grad[0] / n;
    for (auto& v : g.storage()) v += d;
  });
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mean_abs_diff");
  const T n = static_cast<T>(a.value().size());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  double acc = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) acc += std::abs(av[i] - bv[i]);
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), {a, b}, [n](Node<T>& self) {
    const T* x = self.inputs[0]->value.data();
    const T* y = self.inputs[1]->value.data();
    const T d = self.grad[0] / n;
    const std::size_t len = self.inputs[0]->value.size();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.input_needs_grad(k)) continue;
      T* g = self.inputs[k]->grad_buffer().data();
      const T sgn = k == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < len; ++i) {
        const T diff = x[i] - y[i];
        if (diff > T(0)) {
          g[i] += sgn * d;
        } else if (diff < T(0)) {
          g[i] -= sgn * d;
        }
      }
    }
  });
}

template <typename T>
Var<T> hinge_mean(const Var<T>& scores, T sign) {
  const T n = static_cast<T>(scores.value().size());
  double acc = 0;
  for (T v : scores.value().values()) {
    const T t = T(1) - sign * v;
    acc += t > T(0) || std::isnan(t) ? t : T(0);  // NaN must reach the finiteness check
  }
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), {scores}, [n, sign](Node<T>& self) {
    const T* s = self.inputs[0]->value.data();
    T* g = self.inputs[0]->grad_buffer().data();
    const T d = self.grad[0] / n;
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) {
      if (T(1) - sign * s[i] > T(0)) g[i] -= sign * d;
    }
  });
}

// ---- batched matrices -------------------------------------------------------

template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw DimensionError("batched_matmul: expected (N,R,C) operands, got " + to_string(av.shape()) + " and " +
                         to_string(bv.shape()));
  }
  const int batch = av.dim(0);
  const int ra = av.dim(1), ca = av.dim(2), rb = bv.dim(1), cb = bv.dim(2);
  const int m = trans_a ? ca : ra, k = trans_a ? ra : ca;
  const int kb = trans_b ? cb : rb, p = trans_b ? rb : cb;
  if (k != kb) throw DimensionError("batched_matmul: inner dimensions differ");
  Tensor<T> out({batch, m, p});
  const std::size_t sa = static_cast<std::size_t>(ra) * ca, sb = static_cast<std::size_t>(rb) * cb;
  const std::size_t sc = static_cast<std::size_t>(m) * p;
  for (int n = 0; n < batch; ++n) {
    gemm<T>(trans_a, trans_b, m, p, k, T(1), av.data() + n * sa, ca, bv.data() + n * sb, cb, T(0),
            out.data() + n * sc, p);
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    const T* A = self.inputs[0]->value.data();
    const T* B = self.inputs[1]->value.data();
    for (int n = 0; n < batch; ++n) {
      const T* dC = self.grad.data() + n * sc;
      if (self.input_needs_grad(0)) {
        T* dA = self.inputs[0]->grad_buffer().data() + n * sa;
        if (!trans_a) {
          gemm<T>(false, !trans_b, m, k, p, T(1), dC, p, B + n * sb, cb, T(1), dA, ca);
        } else {
          gemm<T>(trans_b, true, k, m, p, T(1), B + n * sb, cb, dC, p, T(1), dA, ca);
        }
      }
      if (self.input_needs_grad(1)) {
        T* dB = self.inputs[1]->grad_buffer().data() + n * sb;
        if (!trans_b) {
          gemm<T>(!trans_a, false, k, p, m, T(1), A + n * sa, ca, dC, p, T(1), dB, cb);
        } else {
          gemm<T>(true, trans_a, p, k, m, T(1), dC, p, A + n * sa, ca, T(1), dB, cb);
        }
      }
    }
  });
}

template <typename T>
Var<T> normalize_rows(const Var<T>& a, T eps) {
  const Tensor<T>& av = a.value();
  if (av.rank() != 3) throw DimensionError("normalize_rows: expected (N,P,D)");
  const std::size_t rows = static_cast<std::size_t>(av.dim(0)) * av.dim(1);
  const std::size_t d = static_cast<std::size_t>(av.dim(2));
  auto norms = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out = av;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    T ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += row[i] * row[i];
    const T nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    const T inv = T(1) / (nrm + eps);
    for (std::size_t i = 0; i < d; ++i) row[i] *= inv;
  }
  return make_result<T>(std::move(out), {a}, [norms, rows, d, eps](Node<T>& self) {
    const T* x = self.inputs[0]->value.data();
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x + r * d;
      const T* dy = self.grad.data() + r * d;
      T* gr = g + r * d;
      const T nrm = (*norms)[r];
      const T denom = nrm + eps;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += xr[i] * dy[i];
      const T coef = nrm > T(0) ? dot / (nrm * denom * denom) : T(0);
      for (std::size_t i = 0; i < d; ++i) gr[i] += dy[i] / denom - coef * xr[i];
    }
  });
}

template <typename T>
Var<T> masked_softmax_rows(const Var<T>& logits, const std::vector<std::vector<std::uint8_t>>& allowed) {
  const Tensor<T>& lv = logits.value();
  if (lv.rank() != 3) throw DimensionError("masked_softmax_rows: expected (N,P,Q)");
  const int batch = lv.dim(0), rows = lv.dim(1), cols = lv.dim(2);
  if (static_cast<int>(allowed.size()) != batch) throw DimensionError("masked_softmax_rows: mask batch mismatch");
  for (const auto& a : allowed) {
    if (static_cast<int>(a.size()) != cols) throw DimensionError("masked_softmax_rows: mask width mismatch");
  }
  Tensor<T> out(lv.shape());
  for (int n = 0; n < batch; ++n) {
    const auto& ok = allowed[static_cast<std::size_t>(n)];
    for (int r = 0; r < rows; ++r) {
      const T* l = lv.data() + (static_cast<std::size_t>(n) * rows + r) * cols;
      T* o = out.data() + (static_cast<std::size_t>(n) * rows + r) * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (int q = 0; q < cols; ++q) {
        if (ok[static_cast<std::size_t>(q)]) mx = std::max(mx, l[q]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      T total = 0;
      for (int q = 0; q < cols; ++q) {
        if (ok[static_cast<std::size_t>(q)]) {
          o[q] = std::exp(l[q] - mx);
          total += o[q];
        }
      }
      const T inv = T(1) / total;
      for (int q = 0; q < cols; ++q) o[q] *= inv;
    }
  }
  return make_result<T>(std::move(out), {logits}, [batch, rows, cols](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    const std::size_t total_rows = static_cast<std::size_t>(batch) * rows;
    for (std::size_t r = 0; r < total_rows; ++r) {
      const T* y = self.value.data() + r * cols;
      const T* dy = self.grad.data() + r * cols;
      T dot = 0;
      for (int q = 0; q < cols; ++q) dot += y[q] * dy[q];
      T* gr = g + r * cols;
      for (int q = 0; q < cols; ++q) gr[q] += y[q] * (dy[q] - dot);
    }
  });
}

// ---- spectral normalisation -------------------------------------------

namespace {
template <typename T>
void normalize_in_place(std::vector<T>& v) {
  T ss = 0;
  for (T x : v) ss += x * x;
  const T inv = T(1) / (std::sqrt(ss) + T(1e-12));
  for (T& x : v) x *= inv;
}
}  // namespace

template <typename T>
Var<T> spectral_normalize(const Var<T>& weight, SpectralState<T>& state, bool update) {
  const Tensor<T>& wv = weight.value();
  const int rows = wv.dim(0);
  const int cols = static_cast<int>(wv.size() / static_cast<std::size_t>(rows));
  if (static_cast<int>(state.u.size()) != rows) throw DimensionError("spectral_normalize: u has wrong length");
  const T* w = wv.data();
  auto mat_t_vec = [&](const std::vector<T>& u) {
    std::vector<T> out(static_cast<std::size_t>(cols), T(0));
    gemm<T>(true, false, cols, 1, rows, T(1), w, cols, u.data(), 1, T(0), out.data(), 1);
    return out;
  };
  auto mat_vec = [&](const std::vector<T>& v) {
    std::vector<T> out(static_cast<std::size_t>(rows), T(0));
    gemm<T>(false, false, rows, 1, cols, T(1), w, cols, v.data(), 1, T(0), out.data(), 1);
    return out;
  };
  std::vector<T> u(state.u.values().begin(), state.u.values().end());
  std::vector<T> v;
  if (update || static_cast<int>(state.v.size()) != cols) {
    v = mat_t_vec(u);
    normalize_in_place(v);
    if (update) {
      u = mat_vec(v);
      normalize_in_place(u);
    }
    state.u = Tensor<T>({rows}, u);
    state.v = Tensor<T>({cols}, v);
  } else {
    v.assign(state.v.values().begin(), state.v.values().end());
  }
  const std::vector<T> wv_prod = mat_vec(v);
  T sigma = 0;
  for (int r = 0; r < rows; ++r) sigma += u[static_cast<std::size_t>(r)] * wv_prod[static_cast<std::size_t>(r)];
  state.sigma = sigma;

  Tensor<T> out = wv;
  for (auto& x : out.storage()) x /= sigma;
  return make_result<T>(std::move(out), {weight}, [u, v, sigma, rows, cols](Node<T>& self) {
    const T* W = self.inputs[0]->value.data();
    const T* G = self.grad.data();
    T* dW = self.inputs[0]->grad_buffer().data();
    const std::size_t len = static_cast<std::size_t>(rows) * cols;
    T gw = 0;
    for (std::size_t i = 0; i < len; ++i) gw += G[i] * W[i];
    const T coef = gw / (sigma * sigma);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
        dW[i] += G[i] / sigma - coef * u[static_cast<std::size_t>(r)] * v[static_cast<std::size_t>(c)];
      }
    }
  });
}

template <typename T>
T spectral_norm_estimate(const Tensor<T>& matrix, int rows, int cols, int iterations) {
  std::vector<T> v(static_cast<std::size_t>(cols));
  for (int c = 0; c < cols; ++c) v[static_cast<std::size_t>(c)] = T(1) + T(0.01) * static_cast<T>(c % 7);
  normalize_in_place(v);
  std::vector<T> u(static_cast<std::size_t>(rows));
  T sigma = 0;
  for (int it = 0; it < iterations; ++it) {
    gemm<T>(false, false, rows, 1, cols, T(1), matrix.data(), cols, v.data(), 1, T(0), u.data(), 1);
    normalize_in_place(u);
    gemm<T>(true, false, cols, 1, rows, T(1), matrix.data(), cols, u.data(), 1, T(0), v.data(), 1);
    T ss = 0;
    for (T x : v) ss += x * x;
    sigma = std::sqrt(ss);
    normalize_in_place(v);
  }
  return sigma;
}

#define CRFILL_INSTANTIATE_OPS(T)                                                                        \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvOptions&);               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> scale(const Var<T>&, T);                                                               \
  template Var<T> add_scalar(const Var<T>&, T);                                                          \
  template Var<T> mul_const(const Var<T>&, const Tensor<T>&);                                            \
  template Var<T> activate(const Var<T>&, Activation, T);                                                \
  template Var<T> gated_activation(const Var<T>&, Activation);                                           \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                           \
  template Var<T> upsample_nearest2x(const Var<T>&);                                                     \
  template Var<T> resize_bilinear(const Var<T>&, int, int);                                              \
  template Var<T> pad_to(const Var<T>&, int, int);                                                       \
  template Var<T> pad_border(const Var<T>&, int);                                                        \
  template Var<T> crop(const Var<T>&, int, int, int, int);                                               \
  template Var<T> select_batch(const Var<T>&, const std::vector<int>&);                                  \
  template Var<T> detach(const Var<T>&);                                                                 \
  template Var<T> sum(const Var<T>&);                                                                    \
  template Var<T> mean(const Var<T>&);                                                                   \
  template Var<T> mean_abs_diff(const Var<T>&, const Var<T>&);                                           \
  template Var<T> hinge_mean(const Var<T>&, T);                                                          \
  template Var<T> batched_matmul(const Var<T>&, const Var<T>&, bool, bool);                              \
  template Var<T> normalize_rows(const Var<T>&, T);                                                      \
  template Var<T> masked_softmax_rows(const Var<T>&, const std::vector<std::vector<std::uint8_t>>&);     \
  template Var<T> spectral_normalize(const Var<T>&, SpectralState<T>&, bool);                            \
  template T spectral_norm_estimate(const Tensor<T>&, int, int, int);

CRFILL_INSTANTIATE_OPS(float)
CRFILL_INSTANTIATE_OPS(double)

}  // namespace crfill
