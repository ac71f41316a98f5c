#include "crfill/patchops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace crfill {

PatchGeometry make_patch_geometry(int channels, int height, int width, int patch, int stride) {
  if (patch < 1 || stride < 1) throw DimensionError("patch size and stride must be positive");
  if (patch > height || patch > width) {
    throw DimensionError("patch size " + std::to_string(patch) + " exceeds map " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  PatchGeometry g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.patch = patch;
  g.stride = stride;
  g.rows = (height - patch) / stride + 1;
  g.cols = (width - patch) / stride + 1;
  return g;
}

template <typename T>
PatchGrid<T> extract_patches(const Var<T>& feature, int patch, int stride) {
  const Tensor<T>& fv = feature.value();
  if (fv.rank() != 4) throw DimensionError("extract_patches: expected (N,C,H,W), got " + to_string(fv.shape()));
  const PatchGeometry g = make_patch_geometry(fv.dim(1), fv.dim(2), fv.dim(3), patch, stride);
  const int batch = fv.dim(0), count = g.count(), len = g.patch_length();
  Tensor<T> out({batch, count, len});
  for (int n = 0; n < batch; ++n) {
    for (int p = 0; p < count; ++p) {
      T* dst = out.data() + (static_cast<std::size_t>(n) * count + p) * len;
      const int top = g.top(p), left = g.left(p);
      for (int c = 0; c < g.channels; ++c) {
        for (int i = 0; i < patch; ++i) {
          for (int j = 0; j < patch; ++j) *dst++ = fv.at(n, c, top + i, left + j);
        }
      }
    }
  }
  Var<T> patches = make_result<T>(std::move(out), {feature}, [g, batch](Node<T>& self) {
    Tensor<T>& grad = self.inputs[0]->grad_buffer();
    const int count = g.count(), len = g.patch_length();
    for (int n = 0; n < batch; ++n) {
      for (int p = 0; p < count; ++p) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * count + p) * len;
        const int top = g.top(p), left = g.left(p);
        for (int c = 0; c < g.channels; ++c) {
          for (int i = 0; i < g.patch; ++i) {
            for (int j = 0; j < g.patch; ++j) grad.at(n, c, top + i, left + j) += *src++;
          }
        }
      }
    }
  });
  return PatchGrid<T>{g, std::move(patches)};
}

namespace {
std::vector<int> coverage_counts(const PatchGeometry& g) {
  std::vector<int> counts(static_cast<std::size_t>(g.height) * g.width, 0);
  for (int p = 0; p < g.count(); ++p) {
    for (int i = 0; i < g.patch; ++i) {
      for (int j = 0; j < g.patch; ++j) ++counts[static_cast<std::size_t>(g.top(p) + i) * g.width + g.left(p) + j];
    }
  }
  return counts;
}
}  // namespace

template <typename T>
Var<T> fold_patches(const Var<T>& patches, const PatchGeometry& g) {
  const Tensor<T>& pv = patches.value();
  if (pv.rank() != 3 || pv.dim(1) != g.count() || pv.dim(2) != g.patch_length()) {
    throw DimensionError("fold_patches: patches " + to_string(pv.shape()) + " do not match geometry");
  }
  const int batch = pv.dim(0), count = g.count(), len = g.patch_length();
  auto counts = std::make_shared<std::vector<int>>(coverage_counts(g));
  Tensor<T> out({batch, g.channels, g.height, g.width});
  for (int n = 0; n < batch; ++n) {
    for (int p = 0; p < count; ++p) {
      const T* src = pv.data() + (static_cast<std::size_t>(n) * count + p) * len;
      const int top = g.top(p), left = g.left(p);
      for (int c = 0; c < g.channels; ++c) {
        for (int i = 0; i < g.patch; ++i) {
          for (int j = 0; j < g.patch; ++j) out.at(n, c, top + i, left + j) += *src++;
        }
      }
    }
  }
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  for (std::size_t idx = 0; idx < out.size(); ++idx) {
    const int cnt = (*counts)[idx % plane];
    if (cnt > 0) out[idx] /= static_cast<T>(cnt);
  }
  return make_result<T>(std::move(out), {patches}, [g, batch, counts](Node<T>& self) {
    Tensor<T>& grad = self.inputs[0]->grad_buffer();
    const int count = g.count(), len = g.patch_length();
    for (int n = 0; n < batch; ++n) {
      for (int p = 0; p < count; ++p) {
        T* dst = grad.data() + (static_cast<std::size_t>(n) * count + p) * len;
        const int top = g.top(p), left = g.left(p);
        for (int c = 0; c < g.channels; ++c) {
          for (int i = 0; i < g.patch; ++i) {
            for (int j = 0; j < g.patch; ++j) {
              const int y = top + i, x = left + j;
              *dst++ += self.grad.at(n, c, y, x) /
                        static_cast<T>((*counts)[static_cast<std::size_t>(y) * g.width + x]);
            }
          }
        }
      }
    }
  });
}

template <typename T>
SimilarityMap<T> cosine_similarity(const PatchGrid<T>& grid, T eps) {
  if (grid.count() == 0) throw DimensionError("cosine_similarity: empty patch grid");
  Var<T> unit = normalize_rows(grid.patches, eps);
  SimilarityMap<T> sim;
  sim.geometry = grid.geometry;
  sim.values = batched_matmul(unit, unit, false, true);
  return sim;
}

template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, int scale) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw DimensionError("downsample_mask: expected (N,1,H,W)");
  if (scale < 1 || mask.dim(2) % scale != 0 || mask.dim(3) % scale != 0) {
    throw DimensionError("downsample_mask: scale " + std::to_string(scale) + " does not divide " +
                         to_string(mask.shape()));
  }
  if (scale == 1) return mask;
  const int h = mask.dim(2) / scale, w = mask.dim(3) / scale;
  Tensor<T> out({mask.dim(0), 1, h, w});
  for (int n = 0; n < mask.dim(0); ++n) {
    for (int y = 0; y < mask.dim(2); ++y) {
      for (int x = 0; x < mask.dim(3); ++x) {
        T& cell = out.at(n, 0, y / scale, x / scale);
        cell = std::max(cell, mask.at(n, 0, y, x));
      }
    }
  }
  return out;
}

template <typename T>
std::vector<KnownSet> known_sets(const Tensor<T>& mask, int patch, int stride, int feature_scale) {
  const Tensor<T> cells = downsample_mask(mask, feature_scale);
  const PatchGeometry g = make_patch_geometry(1, cells.dim(2), cells.dim(3), patch, stride);
  std::vector<KnownSet> sets(static_cast<std::size_t>(cells.dim(0)), KnownSet(static_cast<std::size_t>(g.count()), 0));
  for (int n = 0; n < cells.dim(0); ++n) {
    for (int p = 0; p < g.count(); ++p) {
      bool clean = true;
      for (int i = 0; i < patch && clean; ++i) {
        for (int j = 0; j < patch && clean; ++j) clean = cells.at(n, 0, g.top(p) + i, g.left(p) + j) == T(0);
      }
      sets[static_cast<std::size_t>(n)][static_cast<std::size_t>(p)] = clean ? 1 : 0;
    }
  }
  return sets;
}

template <typename T>
KnownSet mask_to_known_set(const Tensor<T>& mask, int patch, int stride, int feature_scale) {
  Tensor<T> m = mask;
  if (m.rank() == 2) m.reshape({1, 1, mask.dim(0), mask.dim(1)});
  if (m.rank() != 4 || m.dim(0) != 1) throw DimensionError("mask_to_known_set: expected a single mask");
  auto sets = known_sets(m, patch, stride, feature_scale);
  if (!has_known(sets.front())) throw EmptyKnownSetError("no fully known patch: the image is entirely missing");
  return std::move(sets.front());
}

namespace {
template <typename T>
void check_replace_inputs(const PatchGrid<T>& features, const SimilarityMap<T>& sim) {
  const int batch = features.patches.dim(0), count = features.count();
  const Shape want{batch, count, count};
  if (sim.values.shape() != want) {
    throw DimensionError("similarity " + to_string(sim.values.shape()) + " does not match patch grid " +
                         to_string(want));
  }
  if (static_cast<int>(sim.known.size()) != batch) {
    throw DimensionError("similarity map has no known set for every batch item");
  }
  for (const auto& k : sim.known) {
    if (static_cast<int>(k.size()) != count) throw DimensionError("known set length does not match patch count");
    if (!has_known(k)) throw EmptyKnownSetError("no known patch to borrow from");
  }
}
}  // namespace

template <typename T>
Var<T> soft_replace(const PatchGrid<T>& features, const SimilarityMap<T>& sim, T alpha) {
  if (!(alpha > T(0))) throw std::invalid_argument("soft_replace: alpha must be positive");
  check_replace_inputs(features, sim);
  Var<T> weights = masked_softmax_rows(scale(sim.values, alpha), sim.known);
  Var<T> replaced = batched_matmul(weights, features.patches, false, false);
  return fold_patches(replaced, features.geometry);
}

template <typename T>
std::vector<std::vector<int>> hard_assignment(const SimilarityMap<T>& sim) {
  const Tensor<T>& s = sim.values.value();
  const int batch = s.dim(0), count = s.dim(1);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch), std::vector<int>(static_cast<std::size_t>(count), -1));
  for (int n = 0; n < batch; ++n) {
    const auto& known = sim.known.at(static_cast<std::size_t>(n));
    for (int i = 0; i < count; ++i) {
      const T* row = s.data() + (static_cast<std::size_t>(n) * count + i) * count;
      int best = -1;
      for (int j = 0; j < count; ++j) {
        if (!known[static_cast<std::size_t>(j)]) continue;
        if (best < 0 || row[j] > row[best]) best = j;
      }
      out[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)] = best;
    }
  }
  return out;
}

template <typename T>
Var<T> hard_replace(const PatchGrid<T>& features, const SimilarityMap<T>& sim) {
  check_replace_inputs(features, sim);
  const auto assign = hard_assignment(sim);
  const Tensor<T>& fv = features.patches.value();
  const int batch = fv.dim(0), count = fv.dim(1), len = fv.dim(2);
  Tensor<T> out(fv.shape());
  for (int n = 0; n < batch; ++n) {
    for (int i = 0; i < count; ++i) {
      const int j = assign[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)];
      const T* src = fv.data() + (static_cast<std::size_t>(n) * count + j) * len;
      std::copy(src, src + len, out.data() + (static_cast<std::size_t>(n) * count + i) * len);
    }
  }
  Var<T> gathered = make_result<T>(std::move(out), {features.patches}, [assign, batch, count, len](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (int n = 0; n < batch; ++n) {
      for (int i = 0; i < count; ++i) {
        const int j = assign[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)];
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * count + i) * len;
        T* dst = g + (static_cast<std::size_t>(n) * count + j) * len;
        for (int d = 0; d < len; ++d) dst[d] += src[d];
      }
    }
  });
  return fold_patches(gathered, features.geometry);
}

template <typename T>
JigsawResult jigsaw_compose(const Tensor<float>& image, const Tensor<float>& mask, const SimilarityMap<T>& sim,
                            int feature_scale) {
  if (image.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || image.dim(0) != mask.dim(0) ||
      image.dim(2) != mask.dim(2) || image.dim(3) != mask.dim(3)) {
    throw DimensionError("jigsaw_compose: image " + to_string(image.shape()) + " and mask " +
                         to_string(mask.shape()) + " disagree");
  }
  const PatchGeometry& g = sim.geometry;
  if (g.height * feature_scale > image.dim(2) || g.width * feature_scale > image.dim(3)) {
    throw DimensionError("jigsaw_compose: similarity grid footprint exceeds the image");
  }
  if (sim.batch() != image.dim(0) || static_cast<int>(sim.known.size()) != image.dim(0)) {
    throw DimensionError("jigsaw_compose: similarity batch does not match image batch");
  }
  const int batch = image.dim(0), channels = image.dim(1), height = image.dim(2), width = image.dim(3);
  const int foot = g.patch * feature_scale;
  const auto assign = hard_assignment(sim);

  JigsawResult result{image, std::vector<bool>(static_cast<std::size_t>(batch), false)};
  std::vector<double> acc(static_cast<std::size_t>(channels) * height * width);
  std::vector<int> hits(static_cast<std::size_t>(height) * width);
  for (int n = 0; n < batch; ++n) {
    const auto& known = sim.known[static_cast<std::size_t>(n)];
    if (!has_known(known)) {
      result.skipped[static_cast<std::size_t>(n)] = true;
      continue;
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(hits.begin(), hits.end(), 0);
    for (int i = 0; i < g.count(); ++i) {
      if (known[static_cast<std::size_t>(i)]) continue;
      const int j = assign[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)];
      const int dy = g.top(i) * feature_scale, dx = g.left(i) * feature_scale;
      const int sy = g.top(j) * feature_scale, sx = g.left(j) * feature_scale;
      for (int y = 0; y < foot; ++y) {
        for (int x = 0; x < foot; ++x) {
          ++hits[static_cast<std::size_t>(dy + y) * width + dx + x];
          for (int c = 0; c < channels; ++c) {
            acc[(static_cast<std::size_t>(c) * height + dy + y) * width + dx + x] += image.at(n, c, sy + y, sx + x);
          }
        }
      }
    }
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const int h = hits[static_cast<std::size_t>(y) * width + x];
        if (h == 0 || mask.at(n, 0, y, x) == 0.0f) continue;
        for (int c = 0; c < channels; ++c) {
          result.image.at(n, c, y, x) =
              static_cast<float>(acc[(static_cast<std::size_t>(c) * height + y) * width + x] / h);
        }
      }
    }
  }
  return result;
}

namespace {
template <typename T>
std::pair<PatchGrid<T>, SimilarityMap<T>> padded_attention_grid(const Var<T>& features, const Tensor<T>& mask,
                                                                int patch, int stride) {
  const Tensor<T>& fv = features.value();
  if (fv.rank() != 4) throw DimensionError("contextual_attention: expected (N,C,h,w) features");
  if (mask.rank() != 4 || mask.dim(0) != fv.dim(0) || mask.dim(2) % fv.dim(2) != 0 ||
      mask.dim(3) % fv.dim(3) != 0 || mask.dim(2) / fv.dim(2) != mask.dim(3) / fv.dim(3)) {
    throw DimensionError("contextual_attention: mask " + to_string(mask.shape()) + " incompatible with features " +
                         to_string(fv.shape()));
  }
  const int pad = (patch - 1) / 2;
  PatchGrid<T> grid = extract_patches(pad_border(features, pad), patch, stride);
  SimilarityMap<T> sim = cosine_similarity(grid);
  // Padding cells count as known.
  Var<T> cells(downsample_mask(mask, mask.dim(2) / fv.dim(2)));
  sim.known = known_sets(pad_border(cells, pad).value(), patch, stride, 1);
  return {std::move(grid), std::move(sim)};
}
}  // namespace

template <typename T>
SimilarityMap<T> contextual_attention_similarity(const Var<T>& features, const Tensor<T>& mask, int patch,
                                                 int stride) {
  return padded_attention_grid(features, mask, patch, stride).second;
}

template <typename T>
Var<T> contextual_attention(const Var<T>& features, const Tensor<T>& mask, T alpha, int patch, int stride) {
  auto [grid, sim] = padded_attention_grid(features, mask, patch, stride);
  const int pad = (patch - 1) / 2;
  Var<T> out = soft_replace(grid, sim, alpha);
  return crop(out, pad, pad, features.dim(2), features.dim(3));
}

std::uint64_t ca_similarity_flops(std::uint64_t patches, std::uint64_t patch, std::uint64_t channels) {
  return patches * patches * patch * patch * channels;
}

#define CRFILL_INSTANTIATE_PATCHOPS(T)                                                                      \
  template PatchGrid<T> extract_patches(const Var<T>&, int, int);                                           \
  template Var<T> fold_patches(const Var<T>&, const PatchGeometry&);                                        \
  template SimilarityMap<T> cosine_similarity(const PatchGrid<T>&, T);                                      \
  template Tensor<T> downsample_mask(const Tensor<T>&, int);                                                \
  template KnownSet mask_to_known_set(const Tensor<T>&, int, int, int);                                     \
  template std::vector<KnownSet> known_sets(const Tensor<T>&, int, int, int);                               \
  template Var<T> soft_replace(const PatchGrid<T>&, const SimilarityMap<T>&, T);                            \
  template std::vector<std::vector<int>> hard_assignment(const SimilarityMap<T>&);                          \
  template Var<T> hard_replace(const PatchGrid<T>&, const SimilarityMap<T>&);                               \
  template JigsawResult jigsaw_compose(const Tensor<float>&, const Tensor<float>&, const SimilarityMap<T>&, \
                                       int);                                                                \
  template SimilarityMap<T> contextual_attention_similarity(const Var<T>&, const Tensor<T>&, int, int);     \
  template Var<T> contextual_attention(const Var<T>&, const Tensor<T>&, T, int, int);

CRFILL_INSTANTIATE_PATCHOPS(float)
CRFILL_INSTANTIATE_PATCHOPS(double)

}  // namespace crfill
