#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crfill {

/// Raised whenever tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

inline std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major tensor. Image-like data uses NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {
    for (int d : shape_) {
      if (d < 0) throw DimensionError("negative dimension in " + to_string(shape_));
    }
  }
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_)) {
      throw DimensionError("value count " + std::to_string(data_.size()) + " does not match shape " +
                           to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw DimensionError("axis out of range for " + to_string(shape_));
    return shape_[static_cast<std::size_t>(i)];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessor.
  T& at(int n, int c, int h, int w) noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void reshape(Shape shape) {
    if (element_count(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }
  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

/// Copies batch item `n` of an NCHW tensor into a 1xCxHxW tensor.
template <typename T>
Tensor<T> batch_item(const Tensor<T>& t, int n) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = 1;
  std::vector<T> v(t.data() + n * stride, t.data() + (n + 1) * stride);
  return Tensor<T>(std::move(s), std::move(v));
}

/// Stacks equally-shaped tensors along a new (or existing, size-1) leading axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw DimensionError("stack_batch: no items");
  Shape inner = items.front().shape();
  if (!inner.empty() && inner[0] == 1 && inner.size() == 4) inner.erase(inner.begin());
  Shape out_shape = inner;
  out_shape.insert(out_shape.begin(), static_cast<int>(items.size()));
  std::vector<T> v;
  v.reserve(element_count(out_shape));
  for (const auto& it : items) {
    if (it.size() != element_count(inner)) throw DimensionError("stack_batch: ragged items");
    v.insert(v.end(), it.values().begin(), it.values().end());
  }
  return Tensor<T>(std::move(out_shape), std::move(v));
}

}  // namespace crfill
