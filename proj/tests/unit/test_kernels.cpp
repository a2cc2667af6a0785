// SPDX-License-Identifier: Apache-2.0
// Vector kernels against the scalar reference.

#include <condnet/simd/kernels.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace simd = condnet::simd;

namespace {

template <typename T> std::vector<T> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<T> v(n);
  for (T &x : v)
    x = static_cast<T>(u(rng));
  // Exact zeros exercise the relu boundary.
  for (std::size_t i = 0; i < n; i += 7)
    v[i] = T(0);
  return v;
}

template <typename T> class KernelEquivalence : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelEquivalence, Precisions);

TYPED_TEST(KernelEquivalence, ElementwiseKernelsAreBitIdentical) {
  using T = TypeParam;
  if (!simd::isa_available(simd::Isa::Avx2))
    GTEST_SKIP() << "AVX2 not available on this host";
  const auto &ref = simd::kernels_for<T>(simd::Isa::Scalar);
  const auto &vec = simd::kernels_for<T>(simd::Isa::Avx2);
  // Lengths straddle the vector width and the unrolled tail.
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 64u, 1001u}) {
    const auto x = noise<T>(n, 11 + n), y0 = noise<T>(n, 97 + n);
    auto a = y0, b = y0;
    ref.axpy(T(0.37), x.data(), a.data(), n);
    vec.axpy(T(0.37), x.data(), b.data(), n);
    EXPECT_EQ(a, b) << "axpy n=" << n;

    a = y0, b = y0;
    ref.scale(T(-1.25), a.data(), n);
    vec.scale(T(-1.25), b.data(), n);
    EXPECT_EQ(a, b) << "scale n=" << n;

    std::vector<T> ra(n), rb(n);
    ref.relu(x.data(), ra.data(), n);
    vec.relu(x.data(), rb.data(), n);
    EXPECT_EQ(ra, rb) << "relu n=" << n;

    a = y0, b = y0;
    ref.relu_backward(x.data(), y0.data(), a.data(), n);
    vec.relu_backward(x.data(), y0.data(), b.data(), n);
    EXPECT_EQ(a, b) << "relu_backward n=" << n;

    a = y0, b = y0;
    ref.max_inplace(x.data(), a.data(), n);
    vec.max_inplace(x.data(), b.data(), n);
    EXPECT_EQ(a, b) << "max n=" << n;
  }
}

TYPED_TEST(KernelEquivalence, ReductionsAgreeToRounding) {
  using T = TypeParam;
  if (!simd::isa_available(simd::Isa::Avx2))
    GTEST_SKIP() << "AVX2 not available on this host";
  const auto &ref = simd::kernels_for<T>(simd::Isa::Scalar);
  const auto &vec = simd::kernels_for<T>(simd::Isa::Avx2);
  const double tol = sizeof(T) == 4 ? 1e-5 : 1e-13;
  for (std::size_t n : {1u, 5u, 8u, 13u, 100u, 4097u}) {
    const auto x = noise<T>(n, n), y = noise<T>(n, 3 * n + 1);
    double mag = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      mag += std::abs(double(x[i]) * double(y[i]));
    EXPECT_NEAR(ref.dot(x.data(), y.data(), n), vec.dot(x.data(), y.data(), n),
                tol * (1.0 + mag));
    double smag = 0.0;
    for (T v : x)
      smag += std::abs(double(v));
    EXPECT_NEAR(ref.sum(x.data(), n), vec.sum(x.data(), n), tol * (1.0 + smag));
  }
}

TEST(KernelDispatch, ScalarIsAlwaysAvailableAndSelectable) {
  EXPECT_TRUE(simd::isa_available(simd::Isa::Scalar));
  const simd::Isa before = simd::active_isa();
  simd::set_isa(simd::Isa::Scalar);
  EXPECT_EQ(simd::kernels<float>().isa, simd::Isa::Scalar);
  EXPECT_EQ(simd::kernels<double>().isa, simd::Isa::Scalar);
  simd::set_isa(before);
  EXPECT_EQ(simd::isa_name(simd::Isa::Scalar), "scalar");
}

TEST(KernelDispatch, ScalarReferenceValues) {
  const auto &k = simd::kernels_for<double>(simd::Isa::Scalar);
  std::vector<double> x{-1, 0, 2}, y{1, 1, 1}, r(3);
  k.relu(x.data(), r.data(), 3);
  EXPECT_EQ(r, (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(k.dot(x.data(), y.data(), 3), 1.0);
  k.axpy(2.0, x.data(), y.data(), 3);
  EXPECT_EQ(y, (std::vector<double>{-1, 1, 5}));
  std::vector<double> g(3, 0.0), up{5, 6, 7};
  k.relu_backward(x.data(), up.data(), g.data(), 3); // subgradient at 0 is 0
  EXPECT_EQ(g, (std::vector<double>{0, 0, 7}));
}

} // namespace
