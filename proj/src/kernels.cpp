// SPDX-License-Identifier: Apache-2.0
#include "p4q/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace p4q::kernels {

namespace {

using idx_t = std::ptrdiff_t;

template <class T>
inline std::int64_t quantize_one(T x, double scale, std::int64_t zp, std::int64_t lo, std::int64_t hi,
                                 bool& clipped) {
  const double r = std::round(static_cast<double>(x) / scale);
  const double shifted = r + static_cast<double>(zp);
  if (!(shifted >= static_cast<double>(lo))) {
    clipped = true;
    return lo;
  }
  if (shifted > static_cast<double>(hi)) {
    clipped = true;
    return hi;
  }
  clipped = false;
  return static_cast<std::int64_t>(shifted);
}

template <class T>
inline void softmax_row(const T* x, T* y, std::size_t cols, T temperature) {
  T mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp((x[j] - mx) / temperature);
    sum += y[j];
  }
  for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
}

template <class T>
inline void layer_norm_row(const T* x, const T* gamma, const T* beta, T* y, T& mean, T& rstd,
                           std::size_t cols, T eps) {
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) sum += x[j];
  mean = sum / static_cast<T>(cols);
  T var = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(cols);
  rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
}

}  // namespace

namespace serial {

template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
      c[i * n + j] = sum;
    }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
      c[i * n + j] = sum;
    }
}

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols, T temperature) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(x + i * cols, y + i * cols, cols, temperature);
}

template <class T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols, T eps) {
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_row(x + i * cols, gamma, beta, y + i * cols, mean[i], rstd[i], cols, eps);
}

template <class T>
void quantize(const T* x, std::int32_t* q, std::size_t n, const QuantGrid& g) {
  bool clipped = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ch = g.channel_of(i);
    q[i] = static_cast<std::int32_t>(quantize_one(x[i], g.scale[ch], g.zero_point[ch], g.lo, g.hi, clipped));
  }
}

template <class T>
void fake_quant(const T* x, T* y, std::uint8_t* mask, std::size_t n, const QuantGrid& g) {
  bool clipped = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ch = g.channel_of(i);
    const std::int64_t q = quantize_one(x[i], g.scale[ch], g.zero_point[ch], g.lo, g.hi, clipped);
    y[i] = static_cast<T>(static_cast<double>(q - g.zero_point[ch]) * g.scale[ch]);
    if (mask) mask[i] = clipped ? 0 : 1;
  }
}

}  // namespace serial

namespace parallel {

template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const bool wide = m * k * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(m); ++i) {
    T* __restrict crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const bool wide = m * k * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(m); ++i) {
    const T* __restrict arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* __restrict brow = b + j * k;
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += arow[p] * brow[p];
      c[i * n + j] = sum;
    }
  }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const bool wide = m * k * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(m); ++i) {
    T* __restrict crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols, T temperature) {
  const bool wide = rows * cols >= kParallelWork / 16;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(rows); ++i)
    softmax_row(x + i * cols, y + i * cols, cols, temperature);
}

template <class T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols, T eps) {
  const bool wide = rows * cols >= kParallelWork / 16;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(rows); ++i)
    layer_norm_row(x + i * cols, gamma, beta, y + i * cols, mean[i], rstd[i], cols, eps);
}

template <class T>
void quantize(const T* x, std::int32_t* q, std::size_t n, const QuantGrid& g) {
  const bool wide = n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(n); ++i) {
    bool clipped = false;
    const std::size_t ch = g.channel_of(static_cast<std::size_t>(i));
    q[i] = static_cast<std::int32_t>(quantize_one(x[i], g.scale[ch], g.zero_point[ch], g.lo, g.hi, clipped));
  }
}

template <class T>
void fake_quant(const T* x, T* y, std::uint8_t* mask, std::size_t n, const QuantGrid& g) {
  const bool wide = n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (wide)
  for (idx_t i = 0; i < static_cast<idx_t>(n); ++i) {
    bool clipped = false;
    const std::size_t ch = g.channel_of(static_cast<std::size_t>(i));
    const std::int64_t q = quantize_one(x[i], g.scale[ch], g.zero_point[ch], g.lo, g.hi, clipped);
    y[i] = static_cast<T>(static_cast<double>(q - g.zero_point[ch]) * g.scale[ch]);
    if (mask) mask[i] = clipped ? 0 : 1;
  }
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define P4Q_INSTANTIATE(NS, T)                                                                       \
  template void NS::matmul<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);        \
  template void NS::matmul_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);     \
  template void NS::matmul_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);     \
  template void NS::softmax_rows<T>(const T*, T*, std::size_t, std::size_t, T);                      \
  template void NS::layer_norm_rows<T>(const T*, const T*, const T*, T*, T*, T*, std::size_t,        \
                                       std::size_t, T);                                              \
  template void NS::quantize<T>(const T*, std::int32_t*, std::size_t, const QuantGrid&);            \
  template void NS::fake_quant<T>(const T*, T*, std::uint8_t*, std::size_t, const QuantGrid&);

P4Q_INSTANTIATE(serial, float)
P4Q_INSTANTIATE(serial, double)
P4Q_INSTANTIATE(parallel, float)
P4Q_INSTANTIATE(parallel, double)

#undef P4Q_INSTANTIATE

}  // namespace p4q::kernels
