#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rawdn/errors.hpp"

namespace rawdn {

/// Dense row-major tensor. Images are rank 3 and planar: (channels, height, width).
template <typename T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw usage_error("bad_shape", "negative tensor dimension");
    }
    data_.assign(count(shape_), fill);
  }
  Tensor(int c, int h, int w, T fill = T(0)) : Tensor(std::vector<int>{c, h, w}, fill) {}

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? 0 : n;
  }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Image accessors (rank 3).
  int channels() const { return dim(0); }
  int height() const { return dim(1); }
  int width() const { return dim(2); }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(height()) * static_cast<std::size_t>(width());
  }

  T& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  std::span<T> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  bool operator==(const Tensor& o) const = default;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

inline std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw usage_error("shape_mismatch", std::string(what) + ": shape " + shape_string(a.shape()) +
                                            " vs " + shape_string(b.shape()));
  }
}

}  // namespace rawdn
