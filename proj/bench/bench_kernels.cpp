// Serial reference vs OpenMP kernels on shapes the trainer and metrics hit.

#include <benchmark/benchmark.h>

#include <vector>

#include "dbc/kernels.hpp"
#include "dbc/rng.hpp"

namespace {

using namespace dbc;

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Kernel>
void dense_forward(benchmark::State& state) {
  const kernels::DenseShape s{static_cast<std::size_t>(state.range(0)), 128, 128};
  const auto x = filled(s.batch * s.in, 1), w = filled(s.out * s.in, 2), b = filled(s.out, 3);
  std::vector<double> y(s.batch * s.out);
  for (auto _ : state) {
    Kernel(s, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch * s.in * s.out));
}

template <auto Kernel>
void dense_backward_params(benchmark::State& state) {
  const kernels::DenseShape s{static_cast<std::size_t>(state.range(0)), 128, 128};
  const auto dy = filled(s.batch * s.out, 1), x = filled(s.batch * s.in, 2);
  std::vector<double> dw(s.out * s.in), db(s.out);
  for (auto _ : state) {
    Kernel(s, dy, x, dw, db);
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch * s.in * s.out));
}

template <auto Kernel>
void pairwise(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * 2, 1), b = filled(n * 2, 2);
  std::vector<double> d(n * n);
  for (auto _ : state) {
    Kernel(n, n, 2, a, b, d);
    benchmark::DoNotOptimize(d.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

BENCHMARK(dense_forward<kernels::serial::dense_forward>)->Name("dense_forward/serial")->Arg(32)->Arg(1000);
BENCHMARK(dense_forward<kernels::parallel::dense_forward>)->Name("dense_forward/parallel")->Arg(32)->Arg(1000);
BENCHMARK(dense_backward_params<kernels::serial::dense_backward_params>)
    ->Name("dense_backward_params/serial")->Arg(32)->Arg(1000);
BENCHMARK(dense_backward_params<kernels::parallel::dense_backward_params>)
    ->Name("dense_backward_params/parallel")->Arg(32)->Arg(1000);
BENCHMARK(pairwise<kernels::serial::pairwise_sq_dist>)->Name("pairwise_sq_dist/serial")->Arg(500)->Arg(2000);
BENCHMARK(pairwise<kernels::parallel::pairwise_sq_dist>)->Name("pairwise_sq_dist/parallel")->Arg(500)->Arg(2000);

}  // namespace

BENCHMARK_MAIN();
