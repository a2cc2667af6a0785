// SPDX-License-Identifier: Apache-2.0

#include <condnet/tensor.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace condnet {

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (std::size_t d : shape)
    n *= d;
  return n;
}

std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Shape &a, const Shape &b, const char *what) {
  if (a != b)
    throw DimensionError(std::string(what) + ": shape " + shape_string(a) +
                         " does not match " + shape_string(b));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  if (shape_.empty())
    throw DimensionError("tensor rank must be at least 1");
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty())
    throw DimensionError("tensor rank must be at least 1");
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw DimensionError("index rank " + std::to_string(index.size()) +
                         " for tensor " + shape_string(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis])
      throw DimensionError("index out of range for tensor " +
                           shape_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T> T &Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T &Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T> Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > shape_[0])
    throw DimensionError("row slice out of range for " + shape_string(shape_));
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
  return Tensor(std::move(s),
                std::vector<T>(data_.begin() + begin * stride,
                               data_.begin() + end * stride));
}

template <typename T> void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T> bool Tensor<T>::all_finite() const {
  for (T v : data_)
    if (!std::isfinite(v))
      return false;
  return true;
}

template class Tensor<float>;
template class Tensor<double>;

// ---- binary format ---------------------------------------------------------

namespace {

template <typename U> U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

void put_u64(std::ostream &out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char *>(&v), sizeof v);
}

template <typename U> U get_raw(const std::vector<char> &buf, std::size_t pos) {
  U v;
  std::memcpy(&v, buf.data() + pos, sizeof v);
  return to_little(v);
}

} // namespace

template <typename T> void write_tensor(std::ostream &out, const Tensor<T> &t) {
  put_u64(out, t.rank());
  for (std::size_t d : t.shape())
    put_u64(out, d);
  for (T v : t.data()) {
    T le = to_little(v);
    out.write(reinterpret_cast<const char *>(&le), sizeof le);
  }
  if (!out)
    throw FormatError("failed writing tensor");
}

template <typename T> Tensor<T> read_tensor(std::istream &in) {
  std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (buf.size() < 8)
    throw FormatError("tensor file truncated at byte offset " +
                      std::to_string(buf.size()) + " (missing rank)");
  const auto rank = get_raw<std::uint64_t>(buf, 0);
  const std::size_t header = 8 * (rank + 1);
  if (rank == 0 || rank > 16 || buf.size() < header)
    throw FormatError("tensor header invalid or truncated at byte offset " +
                      std::to_string(buf.size()));
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i)
    shape[i] = get_raw<std::uint64_t>(buf, 8 * (i + 1));
  const std::size_t n = shape_numel(shape);
  const std::size_t payload = buf.size() - header;
  std::vector<T> data(n);
  if (n == 0 && payload == 0)
    return Tensor<T>(std::move(shape), std::move(data));
  if (payload == n * sizeof(float)) {
    for (std::size_t i = 0; i < n; ++i)
      data[i] = static_cast<T>(get_raw<float>(buf, header + 4 * i));
  } else if (payload == n * sizeof(double)) {
    for (std::size_t i = 0; i < n; ++i)
      data[i] = static_cast<T>(get_raw<double>(buf, header + 8 * i));
  } else {
    throw FormatError("tensor payload of " + std::to_string(payload) +
                      " bytes does not fit shape " + shape_string(shape) +
                      " (data starts at byte offset " + std::to_string(header) +
                      ")");
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path &path, const Tensor<T> &t) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw FormatError("cannot open for writing: " + path.string());
  write_tensor(out, t);
}

template <typename T> Tensor<T> load_tensor(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open tensor file: " + path.string());
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream &, const Tensor<float> &);
template void write_tensor(std::ostream &, const Tensor<double> &);
template Tensor<float> read_tensor<float>(std::istream &);
template Tensor<double> read_tensor<double>(std::istream &);
template void save_tensor(const std::filesystem::path &, const Tensor<float> &);
template void save_tensor(const std::filesystem::path &, const Tensor<double> &);
template Tensor<float> load_tensor<float>(const std::filesystem::path &);
template Tensor<double> load_tensor<double>(const std::filesystem::path &);

} // namespace condnet
