#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "aline/kernels.hpp"
#include "aline/stats.hpp"
#include "aline/tasks.hpp"

namespace aline {

struct Trajectory {
  Theta theta;
  std::vector<Design> designs;
  std::vector<Observation> outcomes;
};

using PriorFn = std::function<Theta(Rng&)>;

struct SpceResult {
  std::vector<Vec> per_run;  // length T+1 each, entry 0 is 0
  MetricCurve curve;         // empty when fewer than two runs
  double cap = 0.0;          // log(L + 1)
  long clamped = 0;          // non-finite log-likelihoods replaced by a floor
};

/// Per-step sPCE lower bound for one trajectory against the given
/// contrastive draws.
Vec spce_single(const kernels::LoglikFn& loglik, const Trajectory& traj, std::span<const Theta> contrastive,
                bool parallel = true, long* clamped = nullptr);

/// Draws L contrastive parameters per run from `prior` (stream (seed, run))
/// and averages the per-step bounds.
SpceResult spce_bound(const kernels::LoglikFn& loglik, const PriorFn& prior, std::span<const Trajectory> runs,
                      long L, std::uint64_t seed, bool parallel = true);

kernels::LoglikFn task_loglik(const TaskDefinition& task);
PriorFn task_prior(const TaskDefinition& task);

/// Known-variance Gaussian mean estimation with one observation y = theta + noise.
struct ConjugateGaussianToy {
  double prior_sd = 1.0;
  double noise_sd = 0.5;
  double eig() const;
  kernels::LoglikFn loglik() const;
  PriorFn prior() const;
  Trajectory simulate(Rng& rng) const;
};

}  // namespace aline
