#include <benchmark/benchmark.h>

#include <random>

#include "dymn/frontend.hpp"
#include "dymn/ops.hpp"

using namespace dymn;

namespace {

Tensor randt(Shape s, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = d(rng);
  return t;
}

void BM_conv2d_pointwise(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor x = randt({1, c, 16, 62}, 1);
  Tensor w = randt({c, c, 1, 1}, 2);
  Conv2dGeom g;
  for (auto _ : state) {
    Tensor y = conv2d_fwd(x, w, nullptr, g);
    benchmark::DoNotOptimize(y.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c) * c * 16 * 62);
}
BENCHMARK(BM_conv2d_pointwise)->Arg(64)->Arg(240)->Arg(480);

void BM_conv2d_depthwise(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor x = randt({1, c, 16, 62}, 3);
  Tensor w = randt({c, 1, 3, 3}, 4);
  Conv2dGeom g;
  g.groups = c;
  g.pad_f = g.pad_t = 1;
  for (auto _ : state) {
    Tensor y = conv2d_fwd(x, w, nullptr, g);
    benchmark::DoNotOptimize(y.data.data());
  }
}
BENCHMARK(BM_conv2d_depthwise)->Arg(64)->Arg(240)->Arg(480);

void BM_conv2d_backward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor x = randt({1, c, 16, 31}, 5);
  Tensor w = randt({c, c, 1, 1}, 6);
  Conv2dGeom g;
  Tensor gy = randt({1, c, 16, 31}, 7);
  Tensor gx(x.shape), gw(w.shape);
  for (auto _ : state) {
    conv2d_bwd(x, w, g, gy, &gx, &gw, nullptr);
    benchmark::DoNotOptimize(gx.data.data());
  }
}
BENCHMARK(BM_conv2d_backward)->Arg(64)->Arg(240);

void BM_mel_spectrogram(benchmark::State& state) {
  Waveform w;
  w.sample_rate = 32000;
  w.samples.resize(32000);
  std::mt19937 rng(8);
  std::uniform_real_distribution<float> d(-0.5f, 0.5f);
  for (auto& s : w.samples) s = d(rng);
  MelConfig cfg;
  for (auto _ : state) {
    Tensor mel = mel_spectrogram(w, cfg);
    benchmark::DoNotOptimize(mel.data.data());
  }
}
BENCHMARK(BM_mel_spectrogram);

}  // namespace

BENCHMARK_MAIN();
