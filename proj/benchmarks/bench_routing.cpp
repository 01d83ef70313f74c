#include <benchmark/benchmark.h>

#include <random>

#include "qec/pointcloud.hpp"
#include "qec/quat_mean.hpp"
#include "qec/routing.hpp"

namespace {

using namespace qec;

UnitQuaternion draw(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return canonicalize_hemisphere(UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng)));
}

void route(benchmark::State& state, std::size_t L, std::size_t M, int k) {
  std::mt19937_64 rng(1);
  VoteTensor v{L, M, {}};
  for (std::size_t i = 0; i < L * M; ++i) v.votes.push_back(draw(rng));
  const std::vector<double> alpha(L, 1.0);
  RoutingConfig cfg;
  cfg.iterations = k;
  for (auto _ : state) benchmark::DoNotOptimize(dynamic_route(v, alpha, cfg));
  state.counters["ops"] = static_cast<double>(routing_complexity(L, M, 9, static_cast<std::uint64_t>(k)));
}

void BM_RouteL(benchmark::State& state) { route(state, static_cast<std::size_t>(state.range(0)), 16, 3); }
void BM_RouteM(benchmark::State& state) { route(state, 64, static_cast<std::size_t>(state.range(0)), 3); }
void BM_RouteK(benchmark::State& state) { route(state, 64, 16, static_cast<int>(state.range(0))); }

void BM_WeightedMean(benchmark::State& state) {
  std::mt19937_64 rng(2);
  std::vector<UnitQuaternion> qs;
  for (int i = 0; i < state.range(0); ++i) qs.push_back(draw(rng));
  const QuatSet set = QuatSet::uniform(qs);
  for (auto _ : state) benchmark::DoNotOptimize(weighted_mean(set));
}

void BM_FarthestPointSampling(benchmark::State& state) {
  const PointCloud c = sample_surface(toy_template(ToyClass::LShape), static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(farthest_point_sampling(c.points, 64, 0));
}

}  // namespace

BENCHMARK(BM_RouteL)->RangeMultiplier(2)->Range(32, 1024);
BENCHMARK(BM_RouteM)->RangeMultiplier(2)->Range(4, 128);
BENCHMARK(BM_RouteK)->DenseRange(1, 5);
BENCHMARK(BM_WeightedMean)->RangeMultiplier(4)->Range(4, 4096);
BENCHMARK(BM_FarthestPointSampling)->RangeMultiplier(2)->Range(512, 4096);

BENCHMARK_MAIN();
