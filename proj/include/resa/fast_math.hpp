#pragma once

#include <bit>
#include <cstdint>

namespace resa {

// Sixteen-lane vector types (GCC/Clang vector extensions) for the batched
// attention kernel.
using f32x16 = float __attribute__((vector_size(64)));
using i32x16 = std::int32_t __attribute__((vector_size(64)));
using f64x16 = double __attribute__((vector_size(128)));
using i64x16 = std::int64_t __attribute__((vector_size(128)));

namespace detail {

inline std::int32_t to_i32(float x) { return static_cast<std::int32_t>(x); }
inline float to_f32(std::int32_t x) { return static_cast<float>(x); }
inline i32x16 to_i32(f32x16 x) { return __builtin_convertvector(x, i32x16); }
inline f32x16 to_f32(i32x16 x) { return __builtin_convertvector(x, f32x16); }

template <class F>
F splat(float x) {
    return F{} + x;
}

} // namespace detail

/// Branch-free single-precision exp (Cephes polynomial), usable on float and
/// f32x16 with identical per-element results. Max relative error is about
/// 2 ulp. Inputs below the underflow cutoff return exactly 0, so masked scores
/// contribute nothing to softmax sums.
template <class F>
F fast_exp(F x) {
    using detail::splat;
    const F lo = splat<F>(-87.3365447505531f);
    const F hi = splat<F>(88.0f);
    const F keep = x < lo ? splat<F>(0.0f) : splat<F>(1.0f);
    F v = x < lo ? lo : x;
    v = v > hi ? hi : v;

    // n = floor(v * log2(e) + 0.5) via truncate-and-correct.
    const F fx = v * 1.44269504088896341f + 0.5f;
    auto n = detail::to_i32(fx);
    const F back = detail::to_f32(n);
    n = back > fx ? n - 1 : n;
    const F fn = detail::to_f32(n);

    F r = v - fn * 0.693359375f;
    r = r - fn * -2.12194440e-4f;

    F y = splat<F>(1.9875691500e-4f);
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * (r * r) + r + 1.0f;

    const auto bits = (n + 127) << 23;
    return y * std::bit_cast<F>(bits) * keep;
}

} // namespace resa
