// Reference loops against the OpenMP kernels on layer-sized problems.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "magpath/kernels.hpp"

namespace k = magpath::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Par>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Par) k::par::matmul(a, b, c, n, n, n);
    else k::ref::matmul(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Par>
void BM_conv2d(benchmark::State& state) {
  // First encoder block on a 20x patch, or a deeper block on a smaller map.
  const auto side = static_cast<std::size_t>(state.range(0));
  const auto cin = static_cast<std::size_t>(state.range(1));
  const k::Conv2dGeom g{cin, side, side, 2 * cin, 3, 2, 1};
  const auto x = random_vec(cin * side * side, 3), w = random_vec(g.out_channels * cin * 9, 4),
             b = random_vec(g.out_channels, 5);
  std::vector<double> y(g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (Par) k::par::conv2d_forward(g, x, w, b, y);
    else k::ref::conv2d_forward(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Par>
void BM_conv2d_backward(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const k::Conv2dGeom g{8, side, side, 16, 3, 2, 1};
  const auto x = random_vec(8 * side * side, 6), w = random_vec(16 * 8 * 9, 7),
             dy = random_vec(16 * g.out_height() * g.out_width(), 8);
  std::vector<double> dx(x.size()), dw(w.size()), db(16);
  for (auto _ : state) {
    if constexpr (Par) k::par::conv2d_backward(g, x, w, dy, dx, dw, db);
    else k::ref::conv2d_backward(g, x, w, dy, dx, dw, db);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Par>
void BM_conv1d(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const k::Conv1dGeom g{n, 64, 3, 3};
  const auto x = random_vec(n * 64, 9), w = random_vec(3 * 64 * 64, 10), b = random_vec(64, 11);
  std::vector<double> y(n * 64);
  for (auto _ : state) {
    if constexpr (Par) k::par::dilated_conv1d_forward(g, x, w, b, y);
    else k::ref::dilated_conv1d_forward(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul<false>)->Name("matmul/ref")->Arg(64)->Arg(128);
BENCHMARK(BM_matmul<true>)->Name("matmul/par")->Arg(64)->Arg(128);
BENCHMARK(BM_conv2d<false>)->Name("conv2d/ref")->Args({256, 3})->Args({64, 16});
BENCHMARK(BM_conv2d<true>)->Name("conv2d/par")->Args({256, 3})->Args({64, 16});
BENCHMARK(BM_conv2d_backward<false>)->Name("conv2d_backward/ref")->Arg(64);
BENCHMARK(BM_conv2d_backward<true>)->Name("conv2d_backward/par")->Arg(64);
BENCHMARK(BM_conv1d<false>)->Name("dilated_conv1d/ref")->Arg(64)->Arg(256);
BENCHMARK(BM_conv1d<true>)->Name("dilated_conv1d/par")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
