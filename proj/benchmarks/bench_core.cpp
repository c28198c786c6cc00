#include <benchmark/benchmark.h>

#include "diffcls/diffusion.hpp"
#include "diffcls/networks.hpp"
#include "diffcls/tensor.hpp"

using namespace diffcls;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform01(rng);
  return Tensor(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng = make_rng(0);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

EpsilonConfig bench_config(EncoderKind kind) {
  EpsilonConfig cfg;
  cfg.encoder.kind = kind;
  return cfg;
}

void BM_EpsilonForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto kind = static_cast<EncoderKind>(state.range(1));
  Rng rng = make_rng(1);
  EpsilonNetwork net({1, 16, 16}, 2, bench_config(kind), rng);
  const Tensor images = random_tensor({batch, 1, 16, 16}, rng);
  const Tensor z = random_tensor({batch, 2}, rng), g = random_tensor({batch, 2}, rng);
  std::vector<int> t(batch, 5);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(images, z, g, t, false).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_EpsilonForward)
    ->Args({32, static_cast<int>(EncoderKind::Linear)})
    ->Args({32, static_cast<int>(EncoderKind::Attention)});

void BM_EpsilonForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto kind = static_cast<EncoderKind>(state.range(1));
  Rng rng = make_rng(2);
  EpsilonNetwork net({1, 16, 16}, 2, bench_config(kind), rng);
  const Tensor images = random_tensor({batch, 1, 16, 16}, rng);
  const Tensor z = random_tensor({batch, 2}, rng), g = random_tensor({batch, 2}, rng);
  std::vector<int> t(batch, 5);
  for (auto _ : state) {
    Tensor loss = sum(square(net.forward(images, z, g, t, true)));
    loss.backward();
    for (auto& p : net.parameters()) p.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_EpsilonForwardBackward)
    ->Args({32, static_cast<int>(EncoderKind::Linear)})
    ->Args({32, static_cast<int>(EncoderKind::Attention)});

void BM_Sampling(benchmark::State& state) {
  const auto n_samples = static_cast<std::size_t>(state.range(0));
  Rng rng = make_rng(3);
  EpsilonNetwork net({1, 16, 16}, 2, bench_config(EncoderKind::Linear), rng);
  GuidanceClassifier guidance({1, 16, 16}, 2, EncoderConfig{}, rng);
  const Schedule s = Schedule::cosine(10);
  const Tensor images = random_tensor({16, 1, 16, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(predict(net, guidance, s, images, n_samples, 7).size());
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_Sampling)->Arg(1)->Arg(10);

}  // namespace
BENCHMARK_MAIN();
