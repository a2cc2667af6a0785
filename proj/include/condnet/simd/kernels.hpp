// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.hpp
 * @brief  Data-parallel inner loops used by the layer primitives.
 *
 * Every kernel has a scalar reference implementation and, where the build
 * and the host CPU allow it, an AVX2 variant. The variant is chosen once at
 * startup (or forced with set_isa / CONDNET_ISA=scalar|avx2).
 *
 * Elementwise kernels (axpy, scale, relu, relu_backward, max) are required to
 * produce bit-identical results across variants. Reductions (dot, sum) use a
 * lane-blocked order in the vector variant and only agree to rounding.
 */
#pragma once

#include <cstddef>
#include <string_view>

namespace condnet::simd {

enum class Isa { Scalar, Avx2 };

template <typename T> struct Kernels {
  Isa isa;
  /// y[i] += a * x[i]
  void (*axpy)(T a, const T *x, T *y, std::size_t n);
  /// y[i] *= a
  void (*scale)(T a, T *y, std::size_t n);
  T (*dot)(const T *x, const T *y, std::size_t n);
  T (*sum)(const T *x, std::size_t n);
  /// y[i] = max(0, x[i])
  void (*relu)(const T *x, T *y, std::size_t n);
  /// g_in[i] += pre[i] > 0 ? g_out[i] : 0
  void (*relu_backward)(const T *pre, const T *g_out, T *g_in, std::size_t n);
  /// y[i] = max(y[i], x[i])
  void (*max_inplace)(const T *x, T *y, std::size_t n);
};

/// Kernel table currently selected for T.
template <typename T> const Kernels<T> &kernels();

/// Kernel table for a specific variant. Throws if the variant is unavailable.
template <typename T> const Kernels<T> &kernels_for(Isa isa);

bool isa_available(Isa isa);
Isa active_isa();
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

// Per-variant tables, defined in kernels_scalar.cpp / kernels_avx2.cpp.
namespace detail {
template <typename T> const Kernels<T> &scalar_table();
#ifdef CONDNET_BUILD_AVX2
template <typename T> const Kernels<T> &avx2_table();
#endif
} // namespace detail

} // namespace condnet::simd
