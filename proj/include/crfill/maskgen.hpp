#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "crfill/tensor.hpp"

namespace crfill {

/// Masks are (1,1,H,W) float tensors, 1 = missing, 0 = known.
using Mask = Tensor<float>;
using Rng = std::mt19937_64;

enum class MaskKind { kSquare, kIrregular, kBlob };

std::string to_string(MaskKind kind);
/// "square" | "irregular" | "blob"; throws std::invalid_argument otherwise.
MaskKind parse_mask_kind(const std::string& name);

/// Accepted range of missing-pixel fraction for the random generators.
struct CoverageBand {
  double low = 0.05;
  double high = 0.5;
};

class MaskSamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Attempts before a generator gives up on hitting the coverage band.
inline constexpr int kMaxMaskAttempts = 1000;

Mask square_mask(int h, int w, int side, Rng& rng);
/// Union of random polyline brush strokes, resampled until coverage falls in `band`.
Mask irregular_mask(int h, int w, int strokes, int max_width, Rng& rng, CoverageBand band = {});
/// Union of smooth closed blobs (ellipses with a low-frequency radial wobble), same coverage contract.
Mask blob_mask(int h, int w, int n_blobs, Rng& rng, CoverageBand band = {});

double coverage(const Mask& mask);

struct MaskPolicy {
  std::vector<MaskKind> kinds{MaskKind::kSquare, MaskKind::kIrregular};
  int square_side = 0;  // 0: half the shorter side
  int strokes = 4;
  int max_width = 0;  // 0: 1/8 of the shorter side
  int blobs = 2;
  CoverageBand band;
};

/// Draws masks under a policy from a private generator. One kind is chosen per mini-batch.
class MaskGenerator {
 public:
  MaskGenerator(MaskPolicy policy, std::uint64_t seed);

  Mask generate(MaskKind kind, int h, int w);

  struct Batch {
    MaskKind kind;
    Tensor<float> masks;  // (N,1,H,W)
  };
  Batch next_batch(int n, int h, int w);

  const MaskPolicy& policy() const { return policy_; }

 private:
  MaskPolicy policy_;
  Rng rng_;
};

/// 1-bit PNG, white = missing.
void save_mask_png(const std::string& path, const Mask& mask);
/// Any nonzero pixel counts as missing.
Mask load_mask_png(const std::string& path);

}  // namespace crfill
