#include <benchmark/benchmark.h>

#include <random>

#include "dymn/model.hpp"

using namespace dymn;

namespace {

Tensor randt(Shape s, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = d(rng);
  return t;
}

BlockSpec bench_spec(bool dynamic) {
  BlockSpec s;
  s.kernel = 3;
  s.c_in = 40;
  s.c_exp = 120;
  s.c_out = 40;
  s.stride = 1;
  s.act = Act::hardswish;
  if (dynamic) {
    s.attention = AttentionKind::ca;
    s.dyrelu_pos = {false, true, false};
    s.conv = {ConvKind::dynamic, ConvKind::dynamic, ConvKind::dynamic};
    s.context_dim = 32;
  } else {
    s.attention = AttentionKind::se;
  }
  return s;
}

void BM_static_block_forward(benchmark::State& state) {
  std::mt19937 rng(1);
  ParamStore<float> store;
  auto block = StaticIrBlock<float>::create(store, "b", bench_spec(false), rng);
  Tensor x = randt({1, 40, 16, 62}, 2);
  for (auto _ : state) {
    Tape<float> tape;
    RunContext<float> ctx{tape, Mode::eval, 1.0, nullptr, nullptr, 0};
    Var y = block.forward(ctx, tape.input(x));
    benchmark::DoNotOptimize(tape.value(y).data.data());
  }
}
BENCHMARK(BM_static_block_forward);

void BM_dynamic_block_forward(benchmark::State& state) {
  std::mt19937 rng(3);
  ParamStore<float> store;
  auto block = IrBlock<float>::create(store, "b", bench_spec(true), rng);
  Tensor x = randt({1, 40, 16, 62}, 4);
  for (auto _ : state) {
    Tape<float> tape;
    RunContext<float> ctx{tape, Mode::eval, 1.0, nullptr, nullptr, 0};
    Var y = block.forward(ctx, tape.input(x));
    benchmark::DoNotOptimize(tape.value(y).data.data());
  }
}
BENCHMARK(BM_dynamic_block_forward);

void BM_dynamic_block_train_step(benchmark::State& state) {
  std::mt19937 rng(5);
  ParamStore<float> store;
  auto block = IrBlock<float>::create(store, "b", bench_spec(true), rng);
  Tensor x = randt({4, 40, 16, 62}, 6);
  Tensor probe = randt({4, 40, 16, 62}, 7);
  for (auto _ : state) {
    store.zero_grad();
    Tape<float> tape;
    RunContext<float> ctx{tape, Mode::train, 5.0, nullptr, nullptr, 0};
    Var y = block.forward(ctx, tape.input(x));
    Var loss = tape.mean_all(tape.mul(y, tape.constant(probe)));
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.value(loss).item());
  }
}
BENCHMARK(BM_dynamic_block_train_step);

void BM_toy_model_forward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.alpha = 0.4;
  cfg.n_classes = 527;
  cfg.in_freq = 128;
  cfg.placement = Placement::all;
  cfg.finalize();
  std::mt19937 rng(8);
  auto model = Model<float>::build(cfg, rng);
  Tensor x = randt({1, 1, 128, 100}, 9);
  for (auto _ : state) {
    Tensor logits = model.logits(x);
    benchmark::DoNotOptimize(logits.data.data());
  }
}
BENCHMARK(BM_toy_model_forward);

}  // namespace

BENCHMARK_MAIN();
