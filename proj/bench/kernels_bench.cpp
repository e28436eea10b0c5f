// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "p4q/kernels.hpp"
#include "p4q/rng.hpp"

namespace {

using namespace p4q;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::matmul(a.data(), b.data(), c.data(), n, n, n);
    else
      kernels::serial::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 256;
  const auto x = random_values(rows * cols, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::softmax_rows(x.data(), y.data(), rows, cols, 1.0);
    else
      kernels::serial::softmax_rows(x.data(), y.data(), rows, cols, 1.0);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

template <bool Parallel>
void BM_FakeQuant(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_values(n, 4);
  std::vector<double> y(n);
  std::vector<std::uint8_t> mask(n);
  const double scale = 0.02;
  const std::int64_t zp = 0;
  const kernels::QuantGrid grid{&scale, &zp, 1, 1, -128, 127};
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::fake_quant(x.data(), y.data(), mask.data(), n, grid);
    else
      kernels::serial::fake_quant(x.data(), y.data(), mask.data(), n, grid);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

BENCHMARK(BM_Matmul<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Arg(64)->Arg(256);
BENCHMARK(BM_Softmax<false>)->Arg(64)->Arg(1024);
BENCHMARK(BM_Softmax<true>)->Arg(64)->Arg(1024);
BENCHMARK(BM_FakeQuant<false>)->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_FakeQuant<true>)->Arg(1 << 12)->Arg(1 << 20);

}  // namespace

BENCHMARK_MAIN();
