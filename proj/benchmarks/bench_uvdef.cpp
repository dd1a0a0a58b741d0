// Microbenchmarks for the hot paths: quantization, bit-flip injection,
// clean vs hooked forward passes, and the training step.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"
#include "uvdef/rng.hpp"
#include "uvdef/tensor.hpp"
#include "uvdef/train.hpp"

namespace {

using namespace uvdef;

Tensor random_input(uint64_t seed) {
  Tensor x({3, 32, 32});
  Rng rng(seed);
  for (auto& v : x.data) v = rng.uniform01();
  return x;
}

Model desk_model() {
  Model m = make_desk_cnn();
  init_params(m, 99);
  return m;
}

void BM_Quantize(benchmark::State& state) {
  Tensor t({64, 32, 32});
  Rng rng(5);
  for (auto& v : t.data) v = rng.uniform(-3.0, 3.0);
  for (auto _ : state) {
    QuantizedTensor q = quantize(t);
    benchmark::DoNotOptimize(q.data.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * t.numel());
}
BENCHMARK(BM_Quantize);

void BM_Inject(benchmark::State& state) {
  const int64_t n = 65536;
  const int64_t k = state.range(0);
  QuantizedTensor q;
  q.shape = {64, 32, 32};
  q.data.assign(size_t(n), 41);
  std::vector<int64_t> sites;
  Rng site_rng(7);
  for (auto s : sample_k_of_n(site_rng, uint64_t(n), uint64_t(k))) sites.push_back(int64_t(s));
  BitFlipPattern pat{FlipKind::Half};
  uint64_t call = 0;
  for (auto _ : state) {
    QuantizedTensor work = q;
    Rng rng(mix_seed(11, call++));
    inject(work, sites, pat, rng);
    benchmark::DoNotOptimize(work.data.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * k);
}
BENCHMARK(BM_Inject)->Arg(64)->Arg(1024)->Arg(16384);

void BM_ForwardClean(benchmark::State& state) {
  Model m = desk_model();
  Tensor x = random_input(3);
  for (auto _ : state) {
    ForwardResult r = forward(m, x);
    benchmark::DoNotOptimize(r.logits.data.data());
  }
}
BENCHMARK(BM_ForwardClean);

void BM_ForwardFaulty(benchmark::State& state) {
  Model m = desk_model();
  Tensor x = random_input(3);
  DeviceProfile dev = default_device(21);
  const double rate = double(state.range(0)) * 1e-4;
  FaultHook hook = make_device_hook(dev, m, rate, BitFlipPattern{FlipKind::Half}, 17);
  uint64_t tag = 0;
  for (auto _ : state) {
    ForwardResult r = forward(m, x, &hook, tag++);
    benchmark::DoNotOptimize(r.logits.data.data());
  }
}
BENCHMARK(BM_ForwardFaulty)->Arg(2)->Arg(20)->Arg(200);  // 0.02%, 0.2%, 2%

void BM_TrainStep(benchmark::State& state) {
  Model m = desk_model();
  Tensor x({8, 3, 32, 32});
  Rng rng(13);
  for (auto& v : x.data) v = rng.uniform01();
  std::vector<SoftLabel> targets;
  for (int i = 0; i < 8; ++i) targets.push_back(one_hot(i % 10, 10));
  for (auto _ : state) {
    Trace t = forward_trace(m, x);
    Tensor g = ce_logit_grad(t.probs(), targets, 1.0);
    Gradients grads = backward(m, t, g);
    benchmark::DoNotOptimize(grads.weight_grads.data());
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
