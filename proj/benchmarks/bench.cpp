#include <benchmark/benchmark.h>

#include "tivode/metrics.hpp"
#include "tivode/ode.hpp"
#include "tivode/ops.hpp"
#include "tivode/rng.hpp"
#include "tivode/vqvae.hpp"

namespace {

using namespace tivode;

void bm_conv2d_forward(benchmark::State& state) {
  Rng rng(7);
  Tensor x = randn({8, 32, 8, 8}, rng);
  Tensor w = randn({48, 32, 3, 3}, rng, 0.1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, w, 1, 1));
  }
}
BENCHMARK(bm_conv2d_forward);

void bm_conv2d_backward(benchmark::State& state) {
  Rng rng(7);
  Tensor x = randn({8, 32, 8, 8}, rng);
  Tensor w = randn({48, 32, 3, 3}, rng, 0.1);
  for (auto _ : state) {
    Tape tape;
    tape.watch(w);
    Tensor loss = mean(conv2d(x, w, 1, 1));
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(w));
  }
}
BENCHMARK(bm_conv2d_backward);

void bm_dopri5_linear(benchmark::State& state) {
  SolverConfig cfg;
  Tensor y0 = Tensor::full({16}, 1.0);
  auto f = [](double, const Tensor& y) { return scale(y, -1.0); };
  TimeGrid grid({0.0, 1.0});
  for (auto _ : state) {
    benchmark::DoNotOptimize(solve_at(f, y0, grid, cfg));
  }
}
BENCHMARK(bm_dopri5_linear);

void bm_quantize(benchmark::State& state) {
  Rng rng(3);
  Tensor z = randn({8, 32, 8, 8}, rng);
  Tensor table = randn({64, 32}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(quantize(z, table));
  }
}
BENCHMARK(bm_quantize);

void bm_ssim(benchmark::State& state) {
  Rng rng(5);
  Tensor a = rand_uniform({32, 32}, rng, 0.0, 1.0);
  Tensor b = rand_uniform({32, 32}, rng, 0.0, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ssim(a, b, SsimOptions::for_range(1.0)));
  }
}
BENCHMARK(bm_ssim);

}  // namespace

BENCHMARK_MAIN();
