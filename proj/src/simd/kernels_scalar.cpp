// SPDX-License-Identifier: Apache-2.0
// Scalar reference kernels.

#include <condnet/simd/kernels.hpp>

namespace condnet::simd::detail {
namespace {

template <typename T> void axpy(T a, const T *x, T *y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] += a * x[i];
}

template <typename T> void scale(T a, T *y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] *= a;
}

template <typename T> T dot(const T *x, const T *y, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i)
    acc += x[i] * y[i];
  return acc;
}

template <typename T> T sum(const T *x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i)
    acc += x[i];
  return acc;
}

template <typename T> void relu(const T *x, T *y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T *pre, const T *g_out, T *g_in, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    g_in[i] += pre[i] > T(0) ? g_out[i] : T(0);
}

template <typename T> void max_inplace(const T *x, T *y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = x[i] > y[i] ? x[i] : y[i];
}

template <typename T> Kernels<T> make_table() {
  return Kernels<T>{Isa::Scalar,     &axpy<T>, &scale<T>,          &dot<T>,
                    &sum<T>,         &relu<T>, &relu_backward<T>, &max_inplace<T>};
}

} // namespace

template <typename T> const Kernels<T> &scalar_table() {
  static const Kernels<T> table = make_table<T>();
  return table;
}

template const Kernels<float> &scalar_table<float>();
template const Kernels<double> &scalar_table<double>();

} // namespace condnet::simd::detail
