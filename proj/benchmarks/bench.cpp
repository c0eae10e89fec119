#include <benchmark/benchmark.h>

#include <vector>

#include "eqsep/linalg.hpp"
#include "eqsep/network.hpp"
#include "eqsep/optim.hpp"
#include "eqsep/rng.hpp"
#include "eqsep/separation.hpp"

using namespace eqsep;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Xoshiro256ss rng(seed);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = rng.normal();
  return m;
}

std::vector<int> cyclic(std::size_t n, int k) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = int(i % std::size_t(k));
  return y;
}

}  // namespace

// One layer of a profile: 1000 points, 10 classes, width from the arg.
static void BM_Fuzziness(benchmark::State& state) {
  const auto d = std::size_t(state.range(0));
  const Matrix x = gaussian(1000, d, 1);
  const auto y = cyclic(1000, 10);
  for (auto _ : state) benchmark::DoNotOptimize(fuzziness(x, y).value);
}
BENCHMARK(BM_Fuzziness)->Arg(100)->Arg(1000)->Arg(2500)->Unit(benchmark::kMillisecond);

static void BM_FuzzinessDirect(benchmark::State& state) {
  const auto d = std::size_t(state.range(0));
  const Matrix x = gaussian(1000, d, 1);
  const auto y = cyclic(1000, 10);
  for (auto _ : state) benchmark::DoNotOptimize(fuzziness_direct(x, y));
}
BENCHMARK(BM_FuzzinessDirect)->Arg(100)->Unit(benchmark::kMillisecond);

static void BM_SymEig(benchmark::State& state) {
  const auto d = std::size_t(state.range(0));
  const Matrix g = gaussian(d, d, 2);
  const Matrix a = add(g, g.transpose());
  for (auto _ : state) benchmark::DoNotOptimize(sym_eig(a).values.data());
}
BENCHMARK(BM_SymEig)->Arg(10)->Arg(50)->Arg(100)->Unit(benchmark::kMicrosecond);

// Forward, backward and Adam update for one 128-row batch of the depth-8,
// width-100 network.
static void BM_TrainStep(benchmark::State& state) {
  Network net = init_network(NetworkSpec{100, std::vector<std::size_t>(7, 100), 10, true}, 3);
  const Matrix batch = gaussian(128, 100, 4);
  const auto y = cyclic(128, 10);
  OptimConfig cfg;
  Optimizer opt(cfg, net);
  const FreezeMask mask = FreezeMask::none(net);
  for (auto _ : state) {
    const ForwardResult f = forward(net, batch, Mode::kTrain);
    const LossAndGrads g = loss_and_grads(net, f, y);
    opt.step(net, g.grads, 1e-3, mask);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMicrosecond);

static void BM_Probe(benchmark::State& state) {
  const Network net = init_network(NetworkSpec{100, std::vector<std::size_t>(19, 100), 10, true}, 3);
  const Matrix x = gaussian(1000, 100, 5);
  for (auto _ : state) benchmark::DoNotOptimize(probe_features(net, x).layers.size());
}
BENCHMARK(BM_Probe)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
