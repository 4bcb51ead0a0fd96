// Parallel kernels against their serial references.

#include <random>
#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "crt/simulation.hpp"
#include "crt/two_stage.hpp"

using namespace crt;

namespace {

std::vector<ClusterSample> clinics(int n_clinics, int per_clinic) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u;
  std::vector<ClusterSample> out;
  for (int j = 0; j < n_clinics; ++j) {
    ClusterSample c;
    c.clinic_id = "C" + std::to_string(j);
    c.arm = j % 2 ? Arm::intervention : Arm::control;
    std::vector<double> age, bs;
    for (int i = 0; i < per_clinic; ++i) {
      age.push_back(15 + 10 * u(rng));
      bs.push_back(u(rng) < 0.7);
      c.delta.push_back(u(rng) < 0.8);
      c.y.push_back(c.delta.back() ? double(u(rng) < 0.4 + 0.3 * bs.back()) : 0.0);
    }
    c.m.assign(c.y.size(), 0);
    c.w = Covariates(c.y.size());
    c.w.add("age", age, true);
    c.w.add("baseline_suppressed", bs, false);
    out.push_back(std::move(c));
  }
  return out;
}

Stage1Options tmle_stage1() {
  Stage1Options o;
  o.method = Stage1Method::tmle_missing;
  return o;
}

void BM_Stage1Serial(benchmark::State& state) {
  auto cs = clinics(28, int(state.range(0)));
  auto opt = tmle_stage1();
  for (auto _ : state) benchmark::DoNotOptimize(stage1_endpoints_serial(cs, opt));
}

void BM_Stage1Parallel(benchmark::State& state) {
  auto cs = clinics(28, int(state.range(0)));
  auto opt = tmle_stage1();
  for (auto _ : state) benchmark::DoNotOptimize(stage1_endpoints(cs, opt));
}

TrialSimSpec sim_spec() {
  TrialSimSpec s;
  s.pi1 = 0.806;
  s.replicates = 16;
  return s;
}

SimAnalysisConfig primary_only() {
  auto a = SimAnalysisConfig::defaults();
  a.estimators.resize(1);
  return a;
}

void BM_OperatingCharacteristicsSerial(benchmark::State& state) {
  auto spec = sim_spec();
  auto a = primary_only();
  for (auto _ : state) benchmark::DoNotOptimize(operating_characteristics_serial(spec, a));
}

void BM_OperatingCharacteristicsParallel(benchmark::State& state) {
  auto spec = sim_spec();
  auto a = primary_only();
  for (auto _ : state) benchmark::DoNotOptimize(operating_characteristics(spec, a));
}

} // namespace

BENCHMARK(BM_Stage1Serial)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Stage1Parallel)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OperatingCharacteristicsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OperatingCharacteristicsParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
