#include <benchmark/benchmark.h>

#include <random>

#include "abnn/attacks.hpp"
#include "abnn/networks.hpp"
#include "abnn/ops.hpp"

namespace {

using namespace abnn;

Tensor uniform(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Scalar> u(0, 1);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

const std::vector<ConvBlockSpec> kSub{{8, 3, 1, true}, {16, 3, 1, true}, {32, 3, 1, false}};
const std::vector<ConvBlockSpec> kTarget{{16, 3, 1, true}, {32, 3, 1, true}, {64, 3, 1, false}};

// Batch of 32 images, 16 -> 32 channels, 3x3 kernel; arg is the image side.
void BM_Conv2dForward(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({32, 16, side, side}, 1), k = uniform({32, 16, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, 1, 1));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  auto x = uniform({32, 16, 16, 16}, 1);
  Parameter k("k", uniform({32, 16, 3, 3}, 2));
  x.set_requires_grad(true);
  for (auto _ : state) {
    k.value().zero_grad();
    backward(sum(conv2d(x, k.value(), 1, 1)));
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

void BM_PlainForward(benchmark::State& state) {
  auto model = build_plain("plain", kTarget, 5, 3);
  const auto x = uniform({32, 3, 32, 32}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_PlainForward)->Unit(benchmark::kMillisecond);

// One ABNN forward is a substitute pass plus a target pass.
void BM_AbnnForward(benchmark::State& state) {
  auto sub = build_substitute(kSub, 5, 5);
  freeze(*sub);
  auto model = build_abnn(kTarget, sub, 5, 6);
  const auto x = uniform({32, 3, 32, 32}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_AbnnForward)->Unit(benchmark::kMillisecond);

void BM_AbnnTrainStep(benchmark::State& state) {
  auto sub = build_substitute(kSub, 5, 5);
  freeze(*sub);
  auto model = build_abnn(kTarget, sub, 5, 6);
  const auto x = uniform({32, 3, 32, 32}, 7);
  std::vector<int> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 5);
  for (auto _ : state) backward(softmax_cross_entropy(model.forward(x), y));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_AbnnTrainStep)->Unit(benchmark::kMillisecond);

// PGD cost scales with t_max; arg is t_max.
void BM_PgdPerturb(benchmark::State& state) {
  auto model = build_plain("plain", kTarget, 5, 3);
  model.set_mode(NormMode::kEval);
  const auto x = uniform({32, 3, 32, 32}, 8);
  std::vector<int> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 5);
  const auto cfg = PGDConfig::standard(8.0 / 255, static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pgd_perturb(model, x, y, cfg));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_PgdPerturb)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
