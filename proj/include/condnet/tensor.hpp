// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major tensor and its little-endian binary dump format.
 *
 * Binary layout: u64 rank, rank x u64 dims, then the raw values. The element
 * width (4 or 8 bytes) is not stored; readers infer it from the payload size.
 */
#pragma once

#include <condnet/errors.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace condnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_string(const Shape &shape);

template <typename T> class Tensor {
public:
  using value_type = T;

  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T *ptr() { return data_.data(); }
  const T *ptr() const { return data_.data(); }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T> &storage() { return data_; }
  const std::vector<T> &storage() const { return data_; }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  /// Row-major multi-index access (bounds-checked).
  T &at(std::initializer_list<std::size_t> index);
  const T &at(std::initializer_list<std::size_t> index) const;

  /// Same data, new shape with equal element count.
  Tensor reshape(Shape shape) const;
  /// Contiguous slice [begin, end) along the leading dimension.
  Tensor rows(std::size_t begin, std::size_t end) const;

  void fill(T value);
  bool all_finite() const;

  template <typename U> Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor &a, const Tensor &b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

/// Throws DimensionError naming both shapes unless they are equal.
void require_same_shape(const Shape &a, const Shape &b, const char *what);

template <typename T> void write_tensor(std::ostream &out, const Tensor<T> &t);
/// Reads one tensor that occupies the rest of the stream; converts 4/8-byte
/// payloads to T.
template <typename T> Tensor<T> read_tensor(std::istream &in);

template <typename T>
void save_tensor(const std::filesystem::path &path, const Tensor<T> &t);
template <typename T> Tensor<T> load_tensor(const std::filesystem::path &path);

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace condnet
