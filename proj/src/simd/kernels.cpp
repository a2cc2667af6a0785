// SPDX-License-Identifier: Apache-2.0

#include <condnet/simd/kernels.hpp>

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace condnet::simd {
namespace {

Isa detect() {
  if (const char *forced = std::getenv("CONDNET_ISA")) {
    std::string_view name(forced);
    if (name == "scalar")
      return Isa::Scalar;
    if (name == "avx2" && isa_available(Isa::Avx2))
      return Isa::Avx2;
  }
  return isa_available(Isa::Avx2) ? Isa::Avx2 : Isa::Scalar;
}

std::atomic<Isa> &current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

} // namespace

bool isa_available(Isa isa) {
  switch (isa) {
  case Isa::Scalar:
    return true;
  case Isa::Avx2:
#if defined(CONDNET_BUILD_AVX2) && (defined(__GNUC__) || defined(__clang__))
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
  }
  return false;
}

Isa active_isa() { return current().load(); }

void set_isa(Isa isa) {
  if (!isa_available(isa))
    throw std::invalid_argument("instruction set not available: " +
                                std::string(isa_name(isa)));
  current().store(isa);
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::Avx2 ? "avx2" : "scalar";
}

template <typename T> const Kernels<T> &kernels_for(Isa isa) {
  if (!isa_available(isa))
    throw std::invalid_argument("instruction set not available: " +
                                std::string(isa_name(isa)));
#ifdef CONDNET_BUILD_AVX2
  if (isa == Isa::Avx2)
    return detail::avx2_table<T>();
#endif
  return detail::scalar_table<T>();
}

template <typename T> const Kernels<T> &kernels() {
  // set_isa already validated availability.
#ifdef CONDNET_BUILD_AVX2
  if (active_isa() == Isa::Avx2)
    return detail::avx2_table<T>();
#endif
  return detail::scalar_table<T>();
}

template const Kernels<float> &kernels_for<float>(Isa);
template const Kernels<double> &kernels_for<double>(Isa);
template const Kernels<float> &kernels<float>();
template const Kernels<double> &kernels<double>();

} // namespace condnet::simd
