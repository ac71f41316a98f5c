#include "crfill/imageio.hpp"

#include <opencv2/imgcodecs.hpp>

namespace crfill {

Tensor<float> quantize_tensor(const Tensor<float>& image) {
  Tensor<float> out = image;
  for (auto& v : out.storage()) v = dequantize(quantize(v));
  return out;
}

Tensor<float> load_image(const std::string& path) {
  cv::Mat m;
  try {
    m = cv::imread(path, cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw ImageError("cannot decode " + path + ": " + e.what());
  }
  if (m.empty()) throw ImageError("cannot decode " + path);
  if (m.depth() != CV_8U) m.convertTo(m, CV_8U);
  Tensor<float> out({1, 3, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = dequantize(row[x][2 - c]);  // BGR -> RGB
    }
  }
  return out;
}

void save_image(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw DimensionError("save_image: expected (1,3,H,W), got " + to_string(image.shape()));
  }
  cv::Mat m(image.dim(2), image.dim(3), CV_8UC3);
  for (int y = 0; y < m.rows; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = quantize(image.at(0, c, y, x));
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path, m);
  } catch (const cv::Exception& e) {
    throw ImageError("cannot write " + path + ": " + e.what());
  }
  if (!ok) throw ImageError("cannot write " + path);
}

}  // namespace crfill
