#pragma once

// Scalar-loop reference implementations shared by the unit tests and the acceptance suite. They take
// plain tensors, never call into the library's patch code, and compute in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "crfill/patchops.hpp"
#include "crfill/tensor.hpp"

namespace oracle {

using crfill::Tensor;

template <typename T>
Tensor<T> random_tensor(crfill::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Binary (N,1,H,W) mask with each pixel missing with probability p.
template <typename T>
Tensor<T> random_mask(int n, int h, int w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p);
  Tensor<T> m({n, 1, h, w});
  for (auto& v : m.storage()) v = coin(rng) ? T(1) : T(0);
  return m;
}

/// Patch (n, index) of a k x k, stride-s grid, flattened as (c, i, j).
template <typename T>
std::vector<double> slice_patch(const Tensor<T>& f, int n, int index, int k, int s) {
  const int cols = (f.dim(3) - k) / s + 1;
  const int top = (index / cols) * s, left = (index % cols) * s;
  std::vector<double> out;
  for (int c = 0; c < f.dim(1); ++c) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) out.push_back(static_cast<double>(f.at(n, c, top + i, left + j)));
    }
  }
  return out;
}

inline int patch_count(int h, int w, int k, int s) { return ((h - k) / s + 1) * ((w - k) / s + 1); }

/// s_ij = <a_i, a_j> / ((|a_i| + eps)(|a_j| + eps)) for batch item n.
template <typename T>
std::vector<std::vector<double>> cosine(const Tensor<T>& f, int n, int k, int s, double eps = 1e-8) {
  const int p = patch_count(f.dim(2), f.dim(3), k, s);
  std::vector<std::vector<double>> patches;
  for (int i = 0; i < p; ++i) patches.push_back(slice_patch(f, n, i, k, s));
  std::vector<std::vector<double>> sim(p, std::vector<double>(p));
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t d = 0; d < patches[i].size(); ++d) {
        dot += patches[i][d] * patches[j][d];
        ni += patches[i][d] * patches[i][d];
        nj += patches[j][d] * patches[j][d];
      }
      sim[i][j] = dot / ((std::sqrt(ni) + eps) * (std::sqrt(nj) + eps));
    }
  }
  return sim;
}

/// Known patches by direct scan of the max-pooled mask cells.
template <typename T>
std::vector<std::uint8_t> known(const Tensor<T>& mask, int n, int k, int s, int scale) {
  const int h = mask.dim(2) / scale, w = mask.dim(3) / scale;
  const int cols = (w - k) / s + 1, p = patch_count(h, w, k, s);
  std::vector<std::uint8_t> out(p, 0);
  for (int idx = 0; idx < p; ++idx) {
    const int top = (idx / cols) * s * scale, left = (idx % cols) * s * scale;
    bool clean = true;
    for (int y = top; y < top + k * scale; ++y) {
      for (int x = left; x < left + k * scale; ++x) clean = clean && mask.at(n, 0, y, x) == T(0);
    }
    out[idx] = clean;
  }
  return out;
}

/// Reassembles per-patch vectors into a map by averaging every pixel over the patches covering it.
inline Tensor<double> reassemble(const std::vector<std::vector<double>>& patches, int c, int h, int w, int k, int s) {
  const int cols = (w - k) / s + 1;
  Tensor<double> out({1, c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        int hits = 0;
        for (std::size_t idx = 0; idx < patches.size(); ++idx) {
          const int top = (static_cast<int>(idx) / cols) * s, left = (static_cast<int>(idx) % cols) * s;
          if (y < top || y >= top + k || x < left || x >= left + k) continue;
          acc += patches[idx][(static_cast<std::size_t>(ch) * k + (y - top)) * k + (x - left)];
          ++hits;
        }
        out.at(0, ch, y, x) = hits ? acc / hits : 0.0;
      }
    }
  }
  return out;
}

/// Patch i becomes sum_j softmax_j(alpha s_ij) f_j over known j, then overlaps are averaged. Item n only.
template <typename T>
Tensor<double> soft_replace(const Tensor<T>& f, int n, const std::vector<std::vector<double>>& sim,
                            const std::vector<std::uint8_t>& known_set, double alpha, int k, int s) {
  const int p = static_cast<int>(sim.size());
  std::vector<std::vector<double>> patches, out;
  for (int i = 0; i < p; ++i) patches.push_back(slice_patch(f, n, i, k, s));
  for (int i = 0; i < p; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < p; ++j) {
      if (known_set[j]) top = std::max(top, alpha * sim[i][j]);
    }
    double z = 0;
    for (int j = 0; j < p; ++j) {
      if (known_set[j]) z += std::exp(alpha * sim[i][j] - top);
    }
    std::vector<double> acc(patches[0].size(), 0.0);
    for (int j = 0; j < p; ++j) {
      if (!known_set[j]) continue;
      const double wgt = std::exp(alpha * sim[i][j] - top) / z;
      for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += wgt * patches[j][d];
    }
    out.push_back(std::move(acc));
  }
  return reassemble(out, f.dim(1), f.dim(2), f.dim(3), k, s);
}

/// Patch i becomes its first-maximum known patch, then overlaps are averaged.
template <typename T>
Tensor<double> hard_replace(const Tensor<T>& f, int n, const std::vector<std::vector<double>>& sim,
                            const std::vector<std::uint8_t>& known_set, int k, int s) {
  const int p = static_cast<int>(sim.size());
  std::vector<std::vector<double>> out;
  for (int i = 0; i < p; ++i) {
    int best = -1;
    for (int j = 0; j < p; ++j) {
      if (known_set[j] && (best < 0 || sim[i][j] > sim[i][best])) best = j;
    }
    out.push_back(slice_patch(f, n, best, k, s));
  }
  return reassemble(out, f.dim(1), f.dim(2), f.dim(3), k, s);
}

/// Per pixel: y where the mask is 1, u elsewhere.
template <typename T>
Tensor<double> compose(const Tensor<T>& y, const Tensor<T>& u, const Tensor<T>& mask) {
  Tensor<double> out(y.shape());
  for (int n = 0; n < y.dim(0); ++n) {
    for (int c = 0; c < y.dim(1); ++c) {
      for (int i = 0; i < y.dim(2); ++i) {
        for (int j = 0; j < y.dim(3); ++j) {
          const bool hole = mask.at(n, 0, i, j) != T(0);
          out.at(n, c, i, j) = hole ? static_cast<double>(y.at(n, c, i, j)) + u.at(n, c, i, j) : u.at(n, c, i, j);
        }
      }
    }
  }
  return out;
}

/// Largest |a - b| over item n of `a` against a single-item reference.
template <typename T>
double max_abs_diff(const Tensor<T>& a, int n, const Tensor<double>& ref) {
  double worst = 0;
  for (int c = 0; c < ref.dim(1); ++c) {
    for (int i = 0; i < ref.dim(2); ++i) {
      for (int j = 0; j < ref.dim(3); ++j) {
        worst = std::max(worst, std::abs(static_cast<double>(a.at(n, c, i, j)) - ref.at(0, c, i, j)));
      }
    }
  }
  return worst;
}

/// Central difference of f at coordinate i of x.
inline double central_difference(const std::function<double()>& f, double& coordinate, double h) {
  const double saved = coordinate;
  coordinate = saved + h;
  const double up = f();
  coordinate = saved - h;
  const double down = f();
  coordinate = saved;
  return (up - down) / (2 * h);
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale > 0 ? std::sqrt(diff) / scale : 0.0;
}

}  // namespace oracle
