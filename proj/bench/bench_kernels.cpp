// Serial reference kernels against the OpenMP kernels, plus a full batch
// gradient under each policy.

#include <benchmark/benchmark.h>

#include <vector>

#include "zachvit/kernels.hpp"
#include "zachvit/model.hpp"
#include "zachvit/train.hpp"

using namespace zachvit;

namespace {

std::vector<double> filled(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Kernel>
void matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = filled(n * n, rng), b = filled(n * n, rng);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void batch(benchmark::State& state, kernels::Policy policy) {
  ModelConfig config;  // baseline
  Rng rng(2);
  const ModelParams params = init_params(config, rng);
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 16; ++i) {
    Tensor img({config.input_size, config.input_size, config.channels});
    for (auto& v : img.values()) v = rng.uniform();
    images.push_back(std::move(img));
    labels.push_back(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(batch_gradient(params, config, images, labels, {}, policy).loss);
}

}  // namespace

BENCHMARK(matmul<kernels::serial::matmul>)->Name("matmul/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(matmul<kernels::omp::matmul>)->Name("matmul/omp")->RangeMultiplier(2)->Range(64, 512)->UseRealTime();
BENCHMARK(matmul<kernels::serial::matmul_at_b_acc>)->Name("matmul_at_b_acc/serial")->Arg(256);
BENCHMARK(matmul<kernels::omp::matmul_at_b_acc>)->Name("matmul_at_b_acc/omp")->Arg(256)->UseRealTime();
BENCHMARK(matmul<kernels::serial::matmul_a_bt_acc>)->Name("matmul_a_bt_acc/serial")->Arg(256);
BENCHMARK(matmul<kernels::omp::matmul_a_bt_acc>)->Name("matmul_a_bt_acc/omp")->Arg(256)->UseRealTime();
BENCHMARK_CAPTURE(batch, serial, kernels::Policy::Serial)->Name("batch_gradient/serial")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(batch, parallel, kernels::Policy::Parallel)
    ->Name("batch_gradient/parallel")
    ->Unit(benchmark::kMillisecond)
    ->UseRealTime();

BENCHMARK_MAIN();
