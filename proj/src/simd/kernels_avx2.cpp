// SPDX-License-Identifier: Apache-2.0
// AVX2 kernels. Compiled with -mavx2 only (no -mfma): multiply and add stay
// separate roundings so the elementwise kernels match the scalar reference.

#include <condnet/simd/kernels.hpp>

#include <immintrin.h>

namespace condnet::simd::detail {
namespace {

// ---- float -----------------------------------------------------------------

void axpy_f(float a, const float *x, float *y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i)
    y[i] += a * x[i];
}

void scale_f(float a, float *y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(y + i), va));
  for (; i < n; ++i)
    y[i] *= a;
}

float hsum_f(__m256 v) {
  alignas(32) float lanes[8];
  _mm256_store_ps(lanes, v);
  float acc = 0.0f;
  for (float lane : lanes)
    acc += lane;
  return acc;
}

float dot_f(const float *x, const float *y, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_loadu_ps(x + i),
                                             _mm256_loadu_ps(y + i)));
    acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(_mm256_loadu_ps(x + i + 8),
                                             _mm256_loadu_ps(y + i + 8)));
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_loadu_ps(x + i),
                                             _mm256_loadu_ps(y + i)));
  float acc = hsum_f(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i)
    acc += x[i] * y[i];
  return acc;
}

float sum_f(const float *x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float total = hsum_f(acc);
  for (; i < n; ++i)
    total += x[i];
  return total;
}

void relu_f(const float *x, float *y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    // Keep x where x > 0, else +0 (matches the scalar select, including -0).
    __m256 mask = _mm256_cmp_ps(v, zero, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_and_ps(mask, v));
  }
  for (; i < n; ++i)
    y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_f(const float *pre, const float *g_out, float *g_in,
                     std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(pre + i), zero, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(mask, _mm256_loadu_ps(g_out + i));
    _mm256_storeu_ps(g_in + i, _mm256_add_ps(_mm256_loadu_ps(g_in + i), g));
  }
  for (; i < n; ++i)
    g_in[i] += pre[i] > 0.0f ? g_out[i] : 0.0f;
}

void max_inplace_f(const float *x, float *y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vx = _mm256_loadu_ps(x + i);
    __m256 vy = _mm256_loadu_ps(y + i);
    __m256 mask = _mm256_cmp_ps(vx, vy, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_blendv_ps(vy, vx, mask));
  }
  for (; i < n; ++i)
    y[i] = x[i] > y[i] ? x[i] : y[i];
}

// ---- double ----------------------------------------------------------------

void axpy_d(double a, const double *x, double *y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i)
    y[i] += a * x[i];
}

void scale_d(double a, double *y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(y + i), va));
  for (; i < n; ++i)
    y[i] *= a;
}

double hsum_d(__m256d v) {
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, v);
  return ((lanes[0] + lanes[1]) + lanes[2]) + lanes[3];
}

double dot_d(const double *x, const double *y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(x + i),
                                             _mm256_loadu_pd(y + i)));
    acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(_mm256_loadu_pd(x + i + 4),
                                             _mm256_loadu_pd(y + i + 4)));
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(x + i),
                                             _mm256_loadu_pd(y + i)));
  double acc = hsum_d(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i)
    acc += x[i] * y[i];
  return acc;
}

double sum_d(const double *x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double total = hsum_d(acc);
  for (; i < n; ++i)
    total += x[i];
  return total;
}

void relu_d(const double *x, double *y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    __m256d mask = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(mask, v));
  }
  for (; i < n; ++i)
    y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_d(const double *pre, const double *g_out, double *g_in,
                     std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(pre + i), zero, _CMP_GT_OQ);
    __m256d g = _mm256_and_pd(mask, _mm256_loadu_pd(g_out + i));
    _mm256_storeu_pd(g_in + i, _mm256_add_pd(_mm256_loadu_pd(g_in + i), g));
  }
  for (; i < n; ++i)
    g_in[i] += pre[i] > 0.0 ? g_out[i] : 0.0;
}

void max_inplace_d(const double *x, double *y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    __m256d vy = _mm256_loadu_pd(y + i);
    __m256d mask = _mm256_cmp_pd(vx, vy, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_blendv_pd(vy, vx, mask));
  }
  for (; i < n; ++i)
    y[i] = x[i] > y[i] ? x[i] : y[i];
}

} // namespace

template <> const Kernels<float> &avx2_table<float>() {
  static const Kernels<float> table{Isa::Avx2, &axpy_f, &scale_f,
                                    &dot_f,    &sum_f,  &relu_f,
                                    &relu_backward_f, &max_inplace_f};
  return table;
}

template <> const Kernels<double> &avx2_table<double>() {
  static const Kernels<double> table{Isa::Avx2, &axpy_d, &scale_d,
                                     &dot_d,    &sum_d,  &relu_d,
                                     &relu_backward_d, &max_inplace_d};
  return table;
}

} // namespace condnet::simd::detail
