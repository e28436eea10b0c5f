// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "p4q/kernels.hpp"
#include "p4q/rng.hpp"

namespace p4q {
namespace {

template <class T>
std::vector<T> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

template <class T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
class KernelTest : public testing::Test {};

using Precisions = testing::Types<float, double>;
TYPED_TEST_SUITE(KernelTest, Precisions);

TYPED_TEST(KernelTest, MatmulMatchesNaiveTripleLoop) {
  using T = TypeParam;
  Rng rng(1);
  const std::size_t m = 7, k = 5, n = 3;
  const auto a = random_vec<T>(rng, m * k), b = random_vec<T>(rng, k * n);
  std::vector<T> c(m * n);
  kernels::serial::matmul(a.data(), b.data(), c.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      EXPECT_EQ(c[i * n + j], acc);
    }
}

TYPED_TEST(KernelTest, TransposedProductsMatchExplicitTranspose) {
  using T = TypeParam;
  Rng rng(2);
  const std::size_t m = 6, k = 4, n = 5;
  const auto a = random_vec<T>(rng, m * k), bt = random_vec<T>(rng, n * k), at = random_vec<T>(rng, k * m);
  std::vector<T> b(k * n), a2(m * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) b[p * n + i] = bt[i * k + p];
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) a2[i * k + p] = at[p * m + i];
  std::vector<T> nt(m * n), ref(m * n), tn(m * n), ref2(m * n);
  kernels::serial::matmul_nt(a.data(), bt.data(), nt.data(), m, k, n);
  kernels::serial::matmul(a.data(), b.data(), ref.data(), m, k, n);
  kernels::serial::matmul_tn(at.data(), b.data(), tn.data(), m, k, n);
  kernels::serial::matmul(a2.data(), b.data(), ref2.data(), m, k, n);
  EXPECT_TRUE(bit_equal(nt, ref));
  EXPECT_TRUE(bit_equal(tn, ref2));
}

// Sizes above the parallel threshold so the OpenMP paths actually split work.
TYPED_TEST(KernelTest, ParallelMatmulsAreBitIdenticalToSerial) {
  using T = TypeParam;
  Rng rng(3);
  const std::size_t m = 97, k = 83, n = 71;
  const auto a = random_vec<T>(rng, m * k), b = random_vec<T>(rng, k * n);
  const auto bt = random_vec<T>(rng, n * k), at = random_vec<T>(rng, k * m);
  std::vector<T> s(m * n), p(m * n);
  kernels::serial::matmul(a.data(), b.data(), s.data(), m, k, n);
  kernels::parallel::matmul(a.data(), b.data(), p.data(), m, k, n);
  EXPECT_TRUE(bit_equal(s, p));
  kernels::serial::matmul_nt(a.data(), bt.data(), s.data(), m, k, n);
  kernels::parallel::matmul_nt(a.data(), bt.data(), p.data(), m, k, n);
  EXPECT_TRUE(bit_equal(s, p));
  kernels::serial::matmul_tn(at.data(), b.data(), s.data(), m, k, n);
  kernels::parallel::matmul_tn(at.data(), b.data(), p.data(), m, k, n);
  EXPECT_TRUE(bit_equal(s, p));
}

TYPED_TEST(KernelTest, ParallelRowKernelsAreBitIdenticalToSerial) {
  using T = TypeParam;
  Rng rng(4);
  const std::size_t rows = 700, cols = 130;
  const auto x = random_vec<T>(rng, rows * cols, -5.0, 5.0);
  const auto gamma = random_vec<T>(rng, cols), beta = random_vec<T>(rng, cols);
  std::vector<T> s(rows * cols), p(rows * cols);
  kernels::serial::softmax_rows(x.data(), s.data(), rows, cols, T(0.7));
  kernels::parallel::softmax_rows(x.data(), p.data(), rows, cols, T(0.7));
  EXPECT_TRUE(bit_equal(s, p));

  std::vector<T> ms(rows), rs(rows), mp(rows), rp(rows);
  kernels::serial::layer_norm_rows(x.data(), gamma.data(), beta.data(), s.data(), ms.data(), rs.data(), rows, cols,
                                   T(1e-5));
  kernels::parallel::layer_norm_rows(x.data(), gamma.data(), beta.data(), p.data(), mp.data(), rp.data(), rows, cols,
                                     T(1e-5));
  EXPECT_TRUE(bit_equal(s, p));
  EXPECT_TRUE(bit_equal(ms, mp));
  EXPECT_TRUE(bit_equal(rs, rp));
}

TYPED_TEST(KernelTest, ParallelQuantizersAreBitIdenticalToSerial) {
  using T = TypeParam;
  Rng rng(5);
  const std::size_t channels = 9, inner = 1, n = 9 * 9000;
  std::vector<double> scales(channels);
  std::vector<std::int64_t> zps(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    scales[c] = rng.uniform(0.01, 0.1);
    zps[c] = static_cast<std::int64_t>(rng.below(16));
  }
  kernels::QuantGrid grid{scales.data(), zps.data(), channels, inner, 0, 15};
  const auto x = random_vec<T>(rng, n, -2.0, 2.0);
  std::vector<std::int32_t> qs(n), qp(n);
  kernels::serial::quantize(x.data(), qs.data(), n, grid);
  kernels::parallel::quantize(x.data(), qp.data(), n, grid);
  EXPECT_EQ(qs, qp);
  std::vector<T> ys(n), yp(n);
  std::vector<std::uint8_t> ms(n), mp(n);
  kernels::serial::fake_quant(x.data(), ys.data(), ms.data(), n, grid);
  kernels::parallel::fake_quant(x.data(), yp.data(), mp.data(), n, grid);
  EXPECT_TRUE(bit_equal(ys, yp));
  EXPECT_EQ(ms, mp);
}

TYPED_TEST(KernelTest, SoftmaxRowsSumToOne) {
  using T = TypeParam;
  Rng rng(6);
  const std::size_t rows = 20, cols = 17;
  const auto x = random_vec<T>(rng, rows * cols, -30.0, 30.0);
  std::vector<T> y(rows * cols);
  kernels::serial::softmax_rows(x.data(), y.data(), rows, cols, T(1));
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += y[r * cols + c];
    EXPECT_NEAR(sum, 1.0, tol);
  }
}

TEST(Kernels, QuantGridChannelIndexing) {
  kernels::QuantGrid grid;
  grid.channels = 3;
  grid.inner = 4;
  EXPECT_EQ(grid.channel_of(0), 0u);
  EXPECT_EQ(grid.channel_of(4), 1u);
  EXPECT_EQ(grid.channel_of(11), 2u);
  EXPECT_EQ(grid.channel_of(12), 0u);
}

}  // namespace
}  // namespace p4q
