#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "crfill/data.hpp"
#include "crfill/maskgen.hpp"
#include "crfill/nets.hpp"
#include "crfill/patchops.hpp"

namespace crfill {

/// Metrics of one evaluated image; errors on the [0,1] scale.
struct SampleMetrics {
  std::uint64_t index = 0;
  MaskKind kind = MaskKind::kSquare;
  double l1 = 0;
  double psnr = 0;
  double ssim = 0;
  double l1_hole = 0;
  double psnr_hole = 0;
};

struct MetricsRow {
  std::string group;  // mask kind or "all"
  int count = 0;
  double l1 = 0;
  double psnr = 0;
  double ssim = 0;
  double l1_hole = 0;
  double psnr_hole = 0;
};

struct MetricsRecord {
  std::vector<SampleMetrics> samples;
  std::vector<MetricsRow> rows;  // one per mask kind present, then "all"

  const MetricsRow& overall() const;
  /// nullptr when the group is absent.
  const MetricsRow* group(const std::string& name) const;
};

/// Per-sample metrics of `result` against `truth`, both (1,3,H,W) in [-1,1].
SampleMetrics measure(const Tensor<float>& result, const Tensor<float>& truth, const Tensor<float>& mask);
/// Averages per kind plus an "all" row.
MetricsRecord summarize(std::vector<SampleMetrics> samples);

/// Deterministic evaluation set: image i of a held-out split, mask kind kinds[i % kinds], mask seeded by (seed, i).
struct EvalSet {
  const ImageSource* images = nullptr;
  MaskPolicy policy;
  std::uint64_t seed = 0;
  int count = 64;

  Sample sample(int i, MaskKind* kind = nullptr) const;
};

/// Dataset spec with a split seed disjoint from the training stream.
DatasetSpec held_out_spec(const DatasetSpec& spec);

/// Composited inpainting results vs ground truth. The generator only sees U and M.
MetricsRecord eval_model(const Generator<float>& generator, const EvalSet& set, bool highres = false);

/// Similarity over the patch grid of one sample, with known sets attached, and the pixel scale of one cell.
struct SimilarityView {
  SimilarityMap<float> sim;
  int feature_scale = 1;
};
using SimilarityFn = std::function<SimilarityView(const Sample& sample, std::uint64_t index)>;

/// Cosine similarity of ground-truth pixel patches (patch x patch, stride) at feature scale 1.
SimilarityFn ground_truth_similarity(int patch, int stride);
/// Uniform random similarities in [-1, 1] on the same grid as ground_truth_similarity.
SimilarityFn random_similarity(int patch, int stride, std::uint64_t seed);
/// Similarity encoder features of the generator composite (CR-trained pair), grid at 1/4 scale.
SimilarityFn encoder_similarity(const Generator<float>& generator, const SimilarityEncoder<float>& encoder, int patch,
                                int stride);
/// Bottleneck features of a CA generator's refinement stage.
SimilarityFn attention_similarity(const Generator<float>& generator);

/// Jigsaw composites from the similarity source vs ground truth.
MetricsRecord eval_jigsaw(const SimilarityFn& source, const EvalSet& set);

/// One-sided exact sign test that `a` is smaller than `b` pairwise; ties are dropped.
double sign_test_p(const std::vector<double>& a, const std::vector<double>& b);

struct BenchRecord {
  int resolution = 0;
  std::string variant;  // "ca_layer" | "attention_free" | "attention_free_highres"
  double seconds = 0;   // median
  double spread = 0;    // sample standard deviation / median
  bool unstable = false;
  std::uint64_t pairs = 0;  // analytic CA similarity MACs (0 for attention-free)
  double exponent = 0;      // fitted over all resolutions of the variant
};

struct BenchOptions {
  std::vector<int> resolutions{64, 128, 256};
  int repeats = 5;
  int base_width = 16;
  int patch = 3;
  std::uint64_t seed = 1;
  bool highres = false;  // adds a 1024x1024 half-scale-coarse row
};

/// Least-squares slope of log(seconds) against log(pixels).
double fit_exponent(const std::vector<double>& pixels, const std::vector<double>& seconds);

/// Wall-time of the CA layer and of the attention-free generator, single-threaded, median of `repeats`
/// warm runs.
std::vector<BenchRecord> bench_complexity(const BenchOptions& options);

void write_metrics_csv(std::ostream& out, const MetricsRecord& record);
void write_samples_csv(std::ostream& out, const MetricsRecord& record);
void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);

}  // namespace crfill
