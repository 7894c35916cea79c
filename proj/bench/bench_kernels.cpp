// Parallel kernels against their serial references on the layer shapes of the
// desk-scale model (side 64, batch 16).

#include <benchmark/benchmark.h>

#include "strega/kernels.hpp"
#include "strega/reference.hpp"
#include "strega/rng.hpp"

using namespace strega;

namespace {

ImageTensor filled(Dims d, std::uint64_t seed) {
  RngStream r(seed);
  ImageTensor t(std::move(d));
  for (auto& v : t.values()) v = static_cast<float>(r.uniform(-1, 1));
  return t;
}

// Encoder stage i: (cin, cout, input side) at side 64.
constexpr std::size_t kStages[3][3] = {{1, 64, 64}, {64, 128, 32}, {128, 256, 16}};

void conv_args(benchmark::internal::Benchmark* b) {
  for (int s = 0; s < 3; ++s) b->Arg(s);
}

void BM_conv2d_parallel(benchmark::State& state) {
  const auto& st = kStages[state.range(0)];
  const auto x = filled({16, st[0], st[2], st[2]}, 1), w = filled({st[1], st[0], 4, 4}, 2), bias = filled({st[1]}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(x, w, &bias, 2, 1));
}

void BM_conv2d_reference(benchmark::State& state) {
  const auto& st = kStages[state.range(0)];
  const auto x = filled({16, st[0], st[2], st[2]}, 1), w = filled({st[1], st[0], 4, 4}, 2), bias = filled({st[1]}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d(x, w, &bias, 2, 1));
}

void BM_conv_transpose_parallel(benchmark::State& state) {
  const auto& st = kStages[state.range(0)];
  const std::size_t h = st[2] / 2;
  const auto x = filled({16, st[1], h, h}, 4), w = filled({st[1], st[0], 4, 4}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward_input(x, w, st[2], st[2], 2, 1));
}

void BM_conv_transpose_reference(benchmark::State& state) {
  const auto& st = kStages[state.range(0)];
  const std::size_t h = st[2] / 2;
  const auto x = filled({16, st[1], h, h}, 4), w = filled({st[1], st[0], 4, 4}, 5);
  for (auto _ : state)
    benchmark::DoNotOptimize(reference::conv_transpose2d(x, w, static_cast<const ImageTensor*>(nullptr), 2, 1));
}

void BM_batch_norm_parallel(benchmark::State& state) {
  const auto x = filled({16, 64, 32, 32}, 6), gamma = filled({64}, 7), beta = filled({64}, 8);
  ImageTensor xhat(x.dims()), mean({64}), var({64}), inv({64});
  for (auto _ : state) {
    kernels::batch_norm_train(x, 1e-5f, xhat, mean, var, inv);
    benchmark::DoNotOptimize(kernels::channel_affine(xhat, gamma, beta));
  }
}

void BM_batch_norm_reference(benchmark::State& state) {
  const auto x = filled({16, 64, 32, 32}, 6), gamma = filled({64}, 7), beta = filled({64}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(reference::batch_norm(x, gamma, beta, 1e-5));
}

void BM_dense_parallel(benchmark::State& state) {
  const auto x = filled({16, 16384}, 9), w = filled({256, 16384}, 10), b = filled({256}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::dense_forward(x, w, b));
}

void BM_dense_reference(benchmark::State& state) {
  const auto x = filled({16, 16384}, 9), w = filled({256, 16384}, 10), b = filled({256}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(reference::dense(x, w, b));
}

}  // namespace

BENCHMARK(BM_conv2d_parallel)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_reference)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_transpose_parallel)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_transpose_reference)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_batch_norm_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_batch_norm_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_dense_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_dense_reference)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
