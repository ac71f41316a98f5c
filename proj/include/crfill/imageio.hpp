#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "crfill/tensor.hpp"

namespace crfill {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// [-1,1] -> 0..255 with symmetric scaling.
inline std::uint8_t quantize(float x) {
  const float q = std::round((x + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(q < 0.0f ? 0.0f : (q > 255.0f ? 255.0f : q));
}
inline float dequantize(std::uint8_t q) { return static_cast<float>(q) / 127.5f - 1.0f; }

/// Every value snapped to the nearest 8-bit level.
Tensor<float> quantize_tensor(const Tensor<float>& image);

/// PNG/JPEG to a (1,3,H,W) RGB tensor in [-1,1]. Throws ImageError when unreadable.
Tensor<float> load_image(const std::string& path);
/// Writes a (1,3,H,W) tensor as 8-bit RGB; format from the extension.
void save_image(const std::string& path, const Tensor<float>& image);

}  // namespace crfill
