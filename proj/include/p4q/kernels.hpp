// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels in two flavours. serial:: is the reference kept for testing;
// parallel:: splits independent output rows/elements across OpenMP threads and
// performs the same floating-point operations in the same order, so both agree
// bit-for-bit. Row-major storage throughout.

#include <cstddef>
#include <cstdint>

namespace p4q::kernels {

/// Below this many scalar multiply-adds the parallel kernels stay on one thread.
inline constexpr std::size_t kParallelWork = std::size_t{1} << 16;

/// Affine quantizer description shared by the fake-quant and quantize kernels.
/// Element i belongs to channel (i / inner) % channels; per-tensor uses channels == 1.
struct QuantGrid {
  const double* scale = nullptr;
  const std::int64_t* zero_point = nullptr;
  std::size_t channels = 1;
  std::size_t inner = 1;
  std::int64_t lo = 0;
  std::int64_t hi = 0;

  std::size_t channel_of(std::size_t i) const { return (i / inner) % channels; }
};

namespace serial {

/// c[m×n] = a[m×k] · b[k×n]
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
/// c[m×n] = a[m×k] · b[n×k]ᵀ
template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
/// c[m×n] = a[k×m]ᵀ · b[k×n]
template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols, T temperature);

/// Writes the affine-normalized output plus the per-row mean and 1/std used by backward.
template <class T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols, T eps);

/// q = clip(round(x/s) + zp, lo, hi), rounding half away from zero.
template <class T>
void quantize(const T* x, std::int32_t* q, std::size_t n, const QuantGrid& grid);

/// y = (q - zp) * s for q as above; mask[i] = 1 where no clipping happened.
template <class T>
void fake_quant(const T* x, T* y, std::uint8_t* mask, std::size_t n, const QuantGrid& grid);

}  // namespace serial

namespace parallel {

template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols, T temperature);
template <class T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols, T eps);
template <class T>
void quantize(const T* x, std::int32_t* q, std::size_t n, const QuantGrid& grid);
template <class T>
void fake_quant(const T* x, T* y, std::uint8_t* mask, std::size_t n, const QuantGrid& grid);

}  // namespace parallel

/// Number of threads the parallel kernels may use.
int max_threads();

}  // namespace p4q::kernels
