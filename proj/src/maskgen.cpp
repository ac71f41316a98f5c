#include "crfill/maskgen.hpp"

#include "crfill/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace crfill {

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::kSquare:
      return "square";
    case MaskKind::kIrregular:
      return "irregular";
    case MaskKind::kBlob:
      return "blob";
  }
  return "unknown";
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "square") return MaskKind::kSquare;
  if (name == "irregular") return MaskKind::kIrregular;
  if (name == "blob") return MaskKind::kBlob;
  throw std::invalid_argument("unknown mask kind '" + name + "'");
}

namespace {

Mask from_canvas(const cv::Mat& canvas) {
  Mask m({1, 1, canvas.rows, canvas.cols});
  for (int y = 0; y < canvas.rows; ++y) {
    const auto* row = canvas.ptr<std::uint8_t>(y);
    for (int x = 0; x < canvas.cols; ++x) m.at(0, 0, y, x) = row[x] ? 1.0f : 0.0f;
  }
  return m;
}

bool acceptable(const Mask& m, const CoverageBand& band) {
  const double c = coverage(m);
  return c >= band.low && c <= band.high && c < 1.0;
}

template <typename Draw>
Mask sample_in_band(int h, int w, Rng& rng, const CoverageBand& band, const char* what, Draw draw) {
  if (h <= 0 || w <= 0) throw std::invalid_argument(std::string(what) + ": non-positive size");
  if (band.low > band.high) throw std::invalid_argument(std::string(what) + ": empty coverage band");
  for (int attempt = 0; attempt < kMaxMaskAttempts; ++attempt) {
    cv::Mat canvas = cv::Mat::zeros(h, w, CV_8UC1);
    draw(canvas, rng);
    Mask m = from_canvas(canvas);
    if (acceptable(m, band)) return m;
  }
  throw MaskSamplingError(std::string(what) + ": no sample within the coverage band after " +
                          std::to_string(kMaxMaskAttempts) + " attempts");
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

}  // namespace

double coverage(const Mask& mask) {
  double s = 0;
  for (float v : mask.values()) s += v;
  return mask.size() ? s / static_cast<double>(mask.size()) : 0.0;
}

Mask square_mask(int h, int w, int side, Rng& rng) {
  if (side < 0 || side >= std::min(h, w)) {
    throw std::invalid_argument("square_mask: side " + std::to_string(side) + " must be below min(h, w)");
  }
  Mask m({1, 1, h, w});
  if (side == 0) return m;
  const int top = uniform_int(rng, 0, h - side), left = uniform_int(rng, 0, w - side);
  for (int y = top; y < top + side; ++y) {
    for (int x = left; x < left + side; ++x) m.at(0, 0, y, x) = 1.0f;
  }
  return m;
}

Mask irregular_mask(int h, int w, int strokes, int max_width, Rng& rng, CoverageBand band) {
  if (strokes < 1) throw std::invalid_argument("irregular_mask: strokes must be >= 1");
  if (max_width < 1) throw std::invalid_argument("irregular_mask: max_width must be >= 1");
  const int shorter = std::min(h, w);
  return sample_in_band(h, w, rng, band, "irregular_mask", [&](cv::Mat& canvas, Rng& r) {
    for (int s = 0; s < strokes; ++s) {
      const int vertices = uniform_int(r, 2, 8);
      const int width = uniform_int(r, 1, max_width);
      cv::Point p(uniform_int(r, 0, w - 1), uniform_int(r, 0, h - 1));
      for (int v = 0; v < vertices; ++v) {
        const double angle = uniform(r, 0.0, 2.0 * std::numbers::pi);
        const double length = uniform(r, shorter / 16.0 + 1.0, shorter / 4.0 + 1.0);
        // Clamping keeps the visible polyline connected.
        cv::Point q(std::clamp(static_cast<int>(std::lround(p.x + length * std::cos(angle))), 0, w - 1),
                    std::clamp(static_cast<int>(std::lround(p.y + length * std::sin(angle))), 0, h - 1));
        cv::line(canvas, p, q, cv::Scalar(255), width, cv::LINE_8);
        p = q;
      }
    }
  });
}

Mask blob_mask(int h, int w, int n_blobs, Rng& rng, CoverageBand band) {
  if (n_blobs < 1) throw std::invalid_argument("blob_mask: n_blobs must be >= 1");
  const double shorter = std::min(h, w);
  return sample_in_band(h, w, rng, band, "blob_mask", [&](cv::Mat& canvas, Rng& r) {
    constexpr int kVertices = 64;
    for (int b = 0; b < n_blobs; ++b) {
      const double cx = uniform(r, 0.0, w - 1.0), cy = uniform(r, 0.0, h - 1.0);
      const double radius = uniform(r, shorter / 10.0, shorter / 4.0);
      const double aspect = uniform(r, 0.6, 1.0);
      const double rotation = uniform(r, 0.0, std::numbers::pi);
      double amp[3], phase[3];
      for (int k = 0; k < 3; ++k) {
        amp[k] = uniform(r, 0.0, 0.2);
        phase[k] = uniform(r, 0.0, 2.0 * std::numbers::pi);
      }
      std::vector<cv::Point> poly;
      for (int i = 0; i < kVertices; ++i) {
        const double t = 2.0 * std::numbers::pi * i / kVertices;
        double rr = 1.0;
        for (int k = 0; k < 3; ++k) rr += amp[k] * std::cos((k + 2) * t + phase[k]);
        const double ex = radius * rr * std::cos(t), ey = radius * aspect * rr * std::sin(t);
        poly.emplace_back(static_cast<int>(std::lround(cx + ex * std::cos(rotation) - ey * std::sin(rotation))),
                          static_cast<int>(std::lround(cy + ex * std::sin(rotation) + ey * std::cos(rotation))));
      }
      cv::fillPoly(canvas, std::vector<std::vector<cv::Point>>{poly}, cv::Scalar(255), cv::LINE_8);
    }
  });
}

MaskGenerator::MaskGenerator(MaskPolicy policy, std::uint64_t seed) : policy_(std::move(policy)), rng_(seed) {
  if (policy_.kinds.empty()) throw std::invalid_argument("mask policy needs at least one kind");
}

Mask MaskGenerator::generate(MaskKind kind, int h, int w) {
  const int shorter = std::min(h, w);
  switch (kind) {
    case MaskKind::kSquare:
      return square_mask(h, w, policy_.square_side > 0 ? policy_.square_side : shorter / 2, rng_);
    case MaskKind::kIrregular:
      return irregular_mask(h, w, policy_.strokes, policy_.max_width > 0 ? policy_.max_width : std::max(1, shorter / 8),
                            rng_, policy_.band);
    case MaskKind::kBlob:
      return blob_mask(h, w, policy_.blobs, rng_, policy_.band);
  }
  throw std::invalid_argument("unknown mask kind");
}

MaskGenerator::Batch MaskGenerator::next_batch(int n, int h, int w) {
  const auto pick = static_cast<std::size_t>(uniform_int(rng_, 0, static_cast<int>(policy_.kinds.size()) - 1));
  Batch batch{policy_.kinds[pick], {}};
  std::vector<Tensor<float>> items;
  for (int i = 0; i < n; ++i) items.push_back(generate(batch.kind, h, w));
  batch.masks = stack_batch(items);
  return batch;
}

void save_mask_png(const std::string& path, const Mask& mask) {
  if (mask.rank() != 4 || mask.dim(0) != 1 || mask.dim(1) != 1) {
    throw DimensionError("save_mask_png: expected (1,1,H,W), got " + to_string(mask.shape()));
  }
  cv::Mat canvas(mask.dim(2), mask.dim(3), CV_8UC1);
  for (int y = 0; y < canvas.rows; ++y) {
    for (int x = 0; x < canvas.cols; ++x) canvas.at<std::uint8_t>(y, x) = mask.at(0, 0, y, x) != 0.0f ? 255 : 0;
  }
  if (!cv::imwrite(path, canvas, {cv::IMWRITE_PNG_BILEVEL, 1})) {
    throw ImageError("cannot write mask " + path);
  }
}

Mask load_mask_png(const std::string& path) {
  cv::Mat m;
  try {
    m = cv::imread(path, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw ImageError("cannot decode mask " + path + ": " + e.what());
  }
  if (m.empty()) throw ImageError("cannot decode mask " + path);
  const int colour = m.channels() == 4 ? 3 : m.channels();
  std::vector<cv::Mat> planes;
  cv::split(m, planes);
  Mask out({1, 1, m.rows, m.cols});
  for (int c = 0; c < colour; ++c) {
    cv::Mat nz = planes[static_cast<std::size_t>(c)] != 0;
    for (int y = 0; y < m.rows; ++y) {
      for (int x = 0; x < m.cols; ++x) {
        if (nz.at<std::uint8_t>(y, x)) out.at(0, 0, y, x) = 1.0f;
      }
    }
  }
  return out;
}

}  // namespace crfill
