#include <benchmark/benchmark.h>

#include <vector>

#include "tpmcf/dataset.hpp"
#include "tpmcf/gcmf.hpp"
#include "tpmcf/graph.hpp"
#include "tpmcf/pte.hpp"

using namespace tpmcf;

namespace {

QosTensor bench_tensor(std::uint32_t n, std::uint32_t m, double density) {
  SynthOptions o;
  o.n = n;
  o.m = m;
  o.T = 2;
  o.density = density;
  o.seed = 1;
  return synth_tensor(o);
}

void BM_CauchyLoss(benchmark::State& state) {
  std::vector<double> r(static_cast<std::size_t>(state.range(0)));
  for (std::size_t k = 0; k < r.size(); ++k) r[k] = 0.001 * static_cast<double>(k);
  for (auto _ : state) benchmark::DoNotOptimize(cauchy_loss(r, 0.5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CauchyLoss)->Arg(1 << 10)->Arg(1 << 16);

void BM_NormalizeAdjacency(benchmark::State& state) {
  const auto t = bench_tensor(142, static_cast<std::uint32_t>(state.range(0)), 0.1);
  const auto a = build_qig(t, 0);
  for (auto _ : state) benchmark::DoNotOptimize(normalize_adjacency(a));
}
BENCHMARK(BM_NormalizeAdjacency)->Arg(500)->Arg(4500)->Unit(benchmark::kMillisecond);

void BM_GcmfForward(benchmark::State& state) {
  const auto t = bench_tensor(142, static_cast<std::uint32_t>(state.range(0)), 0.1);
  const auto adj = normalize_adjacency(build_qig(t, 0));
  Rng rng(2);
  const Matrix f0 = uniform_matrix(adj.size(), 155, 0.0, 1.0, rng);
  const auto model = GcmfModel::init(155, 64, 0.5, rng);
  for (auto _ : state) benchmark::DoNotOptimize(gcmf_forward(model, adj, f0, 142));
}
BENCHMARK(BM_GcmfForward)->Arg(500)->Arg(4500)->Unit(benchmark::kMillisecond);

void BM_PteBlockForward(benchmark::State& state) {
  Rng rng(3);
  const auto width = static_cast<std::size_t>(state.range(0));
  const auto p = PteBlockParams::init(8, width, 4, 64, 64, 4, 3, 0.0, rng);
  const Matrix x = uniform_matrix(8, static_cast<Eigen::Index>(width), -1.0, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(pte_block_forward(p, x));
}
BENCHMARK(BM_PteBlockForward)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_TqpLossAndGrad(benchmark::State& state) {
  Rng rng(4);
  PteConfig c;
  c.d_k = 64;
  c.d_v = 64;
  c.blocks = static_cast<std::size_t>(state.range(0));
  auto model = PteModel::init(c, 128, rng);
  auto grads = zeros_like(model);
  const Matrix x = uniform_matrix(8, 128, -1.0, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(tqp_loss_and_grad(model, x, 0.5, grads));
}
BENCHMARK(BM_TqpLossAndGrad)->Arg(1)->Arg(4)->Unit(benchmark::kMicrosecond);

void BM_IsolationScores(benchmark::State& state) {
  const auto t = bench_tensor(142, 500, 0.3);
  const auto values = t.values();
  for (auto _ : state) benchmark::DoNotOptimize(isolation_scores(values, 100, 256, 5));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(values.size()));
}
BENCHMARK(BM_IsolationScores)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
