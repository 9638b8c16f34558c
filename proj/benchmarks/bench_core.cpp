#include <benchmark/benchmark.h>

#include <vector>

#include "pdit/env.hpp"
#include "pdit/model.hpp"
#include "pdit/rng.hpp"
#include "pdit/tensor.hpp"

namespace {

using namespace pdit;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor t(std::move(shape));
  for (float& x : t.data()) x = static_cast<float>(rng.uniform()) * 2.0f - 1.0f;
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tape tape;
    Var c = matmul(tape.leaf(a, true), tape.leaf(b, true));
    backward(sum(c));
    benchmark::DoNotOptimize(tape.grad_of(c));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Softmax(benchmark::State& state) {
  const Tensor x = random_tensor({256, 57}, 3);
  for (auto _ : state) {
    Tape tape;
    Var y = softmax(tape.leaf(x, true), 1);
    benchmark::DoNotOptimize(y.value().ptr());
  }
}
BENCHMARK(BM_Softmax);

void BM_Attention(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor q = random_tensor({batch, 57, 16}, 4), k = random_tensor({batch, 57, 16}, 5),
               v = random_tensor({batch, 57, 16}, 6);
  for (auto _ : state) {
    Tape tape;
    const AttentionResult r = attention(tape.leaf(q, true), tape.leaf(k, true), tape.leaf(v, true));
    backward(sum(r.output));
    benchmark::DoNotOptimize(r.output.value().ptr());
  }
}
BENCHMARK(BM_Attention)->Arg(1)->Arg(16)->Arg(64);

void BM_ModelForward(benchmark::State& state) {
  model::ModelConfig c;
  c.arch = static_cast<model::Arch>(state.range(0));
  const model::ModelParams params = model::init_params(c, 7);
  const auto batch = static_cast<std::size_t>(state.range(1));
  std::vector<env::Observation> obs;
  for (std::size_t i = 0; i < batch; ++i) obs.push_back(env::observe(env::generate_instance(i)));
  const std::vector<int> prev_actions(batch, -1), prev_rewards(batch, 0);
  for (auto _ : state) {
    Tape tape;
    const model::BoundParams p(tape, params, false, false);
    const model::ForwardOutput f = model::forward(p, c, {obs, prev_actions, prev_rewards});
    benchmark::DoNotOptimize(f.logits.value().ptr());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_ModelForward)
    ->ArgNames({"arch", "batch"})
    ->Args({static_cast<int>(model::Arch::Pdit), 1})
    ->Args({static_cast<int>(model::Arch::Pdit), 64})
    ->Args({static_cast<int>(model::Arch::Stacked), 64})
    ->Args({static_cast<int>(model::Arch::Baseline), 64});

}  // namespace

BENCHMARK_MAIN();
