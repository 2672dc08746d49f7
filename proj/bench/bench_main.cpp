#include <benchmark/benchmark.h>

#include "aline/kernels.hpp"
#include "aline/spce.hpp"
#include "aline/training.hpp"

namespace {

using namespace aline;

struct Setup {
  TaskDefinition task;
  TrainConfig cfg;
  ModelParams<float> params;
};

Setup make_setup(const std::string& name, int pool, int horizon, int targets) {
  Setup s{make_task(name), {}, {}};
  s.cfg = TrainConfig::for_task(s.task);
  s.cfg.pool_size = pool;
  s.cfg.horizon = horizon;
  s.cfg.target_count = targets;
  s.task.target_count = targets;
  Rng rng = make_stream(1);
  s.params = init_params<float>(model_config_for(s.task), rng);
  return s;
}

void BM_EpisodeGradient(benchmark::State& state) {
  auto s = make_setup("gp1d", static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), 20);
  aline::AlignedVec<float> grad(s.params.data.size());
  int i = 0;
  for (auto _ : state) {
    Rng rng = make_stream(2, {static_cast<std::uint64_t>(i++)});
    const Episode ep = sample_episode(s.task, rng, s.cfg.pool_size);
    RolloutOptions opt;
    auto tr = run_episode<float>(s.params, s.task, s.cfg, ep, opt, rng, grad, 1.0);
    benchmark::DoNotOptimize(tr);
  }
}
BENCHMARK(BM_EpisodeGradient)->Args({50, 10})->Args({100, 30})->Unit(benchmark::kMillisecond);

template <bool Parallel>
void BM_BatchGradient(benchmark::State& state) {
  auto s = make_setup("location_finding", 50, 10, 1);
  aline::AlignedVec<float> grad(s.params.data.size());
  const kernels::EpisodeGradFn<float> fn = [&](int b, std::span<float> g) {
    Rng rng = make_stream(3, {static_cast<std::uint64_t>(b)});
    const Episode ep = sample_episode(s.task, rng, s.cfg.pool_size);
    RolloutOptions opt;
    run_episode<float>(s.params, s.task, s.cfg, ep, opt, rng, g, 1.0 / 16);
  };
  for (auto _ : state) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    if constexpr (Parallel) {
      kernels::batch_gradient_parallel<float>(16, fn, grad);
    } else {
      kernels::batch_gradient_serial<float>(16, fn, grad);
    }
    benchmark::DoNotOptimize(grad.data());
  }
}
BENCHMARK(BM_BatchGradient<false>)->Name("BM_BatchGradient/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchGradient<true>)->Name("BM_BatchGradient/parallel")->Unit(benchmark::kMillisecond);

template <bool Parallel>
void BM_TrajectoryLogliks(benchmark::State& state) {
  const auto task = make_task("location_finding");
  const auto loglik = task_loglik(task);
  Rng rng = make_stream(4);
  std::vector<Theta> thetas;
  for (int l = 0; l < 10000; ++l) thetas.push_back(sample_theta(task, rng));
  const Theta truth = sample_theta(task, rng);
  std::vector<Design> xs = sample_query_pool(task, 10, rng);
  std::vector<Observation> ys;
  for (const auto& x : xs) ys.push_back(simulate(task, truth, x, rng));
  for (auto _ : state) {
    Vec v = Parallel ? kernels::cumulative_logliks_parallel(loglik, thetas, xs, ys)
                     : kernels::cumulative_logliks_serial(loglik, thetas, xs, ys);
    benchmark::DoNotOptimize(v.data());
  }
}
BENCHMARK(BM_TrajectoryLogliks<false>)->Name("BM_TrajectoryLogliks/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrajectoryLogliks<true>)->Name("BM_TrajectoryLogliks/parallel")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
