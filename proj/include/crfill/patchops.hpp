#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "crfill/ops.hpp"

namespace crfill {

/// Layout of a k x k, stride-s patch grid over a C x h x w map.
struct PatchGeometry {
  int channels = 0;
  int height = 0;
  int width = 0;
  int patch = 0;
  int stride = 1;
  int rows = 0;  // patches per column
  int cols = 0;  // patches per row

  int count() const noexcept { return rows * cols; }
  int patch_length() const noexcept { return channels * patch * patch; }
  int top(int index) const noexcept { return (index / cols) * stride; }
  int left(int index) const noexcept { return (index % cols) * stride; }
  /// Patch centre in source coordinates (half-integer for even k).
  std::pair<double, double> center(int index) const noexcept {
    const double half = (patch - 1) / 2.0;
    return {top(index) + half, left(index) + half};
  }
};

PatchGeometry make_patch_geometry(int channels, int height, int width, int patch, int stride);

/// Row-major ordered patches of a batch of feature maps, flattened to (N, P, C*k*k).
template <typename T>
struct PatchGrid {
  PatchGeometry geometry;
  Var<T> patches;

  int count() const noexcept { return geometry.count(); }
};

/// Per-patch membership in the known region (1 = every footprint cell known).
using KnownSet = std::vector<std::uint8_t>;

class EmptyKnownSetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool has_known(const KnownSet& set) {
  for (auto v : set) {
    if (v) return true;
  }
  return false;
}

/// Pairwise cosine similarities (N, P, P) plus, once attached, the known set of every batch item.
template <typename T>
struct SimilarityMap {
  PatchGeometry geometry;
  Var<T> values;
  std::vector<KnownSet> known;

  int batch() const { return values.dim(0); }
  int count() const { return geometry.count(); }
};

template <typename T>
PatchGrid<T> extract_patches(const Var<T>& feature, int patch, int stride);

/// Reassembles (N, P, C*k*k) patches into a map, averaging overlaps by per-cell patch count.
template <typename T>
Var<T> fold_patches(const Var<T>& patches, const PatchGeometry& geometry);

template <typename T>
SimilarityMap<T> cosine_similarity(const PatchGrid<T>& grid, T eps = T(1e-8));

/// Max-pools a (N,1,H,W) mask by `scale`, so a cell is missing if any covered pixel is.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, int scale);

/// Known patches of one mask (1,1,H,W) or (H,W). Throws EmptyKnownSetError when none remain.
template <typename T>
KnownSet mask_to_known_set(const Tensor<T>& mask, int patch, int stride, int feature_scale);

/// Batched variant that never throws; items with no known patch get an all-zero set.
template <typename T>
std::vector<KnownSet> known_sets(const Tensor<T>& mask, int patch, int stride, int feature_scale);

/// Every patch becomes the softmax(alpha * s_ij)-weighted sum of known patches, then the map is refolded.
template <typename T>
Var<T> soft_replace(const PatchGrid<T>& features, const SimilarityMap<T>& sim, T alpha);

/// argmax over known columns per row; ties go to the lowest index. -1 for items with no known patch.
template <typename T>
std::vector<std::vector<int>> hard_assignment(const SimilarityMap<T>& sim);

/// Every patch replaced by its single best known patch.
template <typename T>
Var<T> hard_replace(const PatchGrid<T>& features, const SimilarityMap<T>& sim);

struct JigsawResult {
  Tensor<float> image;
  std::vector<bool> skipped;  // per batch item: no known patch, image returned unchanged
};

/// Pastes the pixels of each missing patch's best known patch into its footprint (overlaps averaged).
/// `feature_scale` maps feature cells of the similarity grid to pixels. Known pixels are never touched.
template <typename T>
JigsawResult jigsaw_compose(const Tensor<float>& image, const Tensor<float>& mask, const SimilarityMap<T>& sim,
                            int feature_scale);

/// Contextual-attention layer: patches of the (same-padded) feature map attend to known patches.
template <typename T>
Var<T> contextual_attention(const Var<T>& features, const Tensor<T>& mask, T alpha, int patch, int stride);

/// Similarity map used inside contextual_attention, exposed for the jigsaw protocol.
template <typename T>
SimilarityMap<T> contextual_attention_similarity(const Var<T>& features, const Tensor<T>& mask, int patch,
                                                 int stride);

/// Multiply-accumulate count of the pairwise similarity: P^2 * k^2 * C.
std::uint64_t ca_similarity_flops(std::uint64_t patches, std::uint64_t patch, std::uint64_t channels);

}  // namespace crfill
