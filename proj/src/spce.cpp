#include "aline/spce.hpp"

#include <cmath>
#include <limits>

#include "aline/math.hpp"

namespace aline {

namespace {
constexpr double kLogFloor = -1e300;

double clamp_finite(double v, long* clamped) {
  if (std::isfinite(v)) return v;
  if (clamped) ++*clamped;
  return kLogFloor;
}
}  // namespace

Vec spce_single(const kernels::LoglikFn& loglik, const Trajectory& traj, std::span<const Theta> contrastive,
                bool parallel, long* clamped) {
  const std::size_t T = traj.designs.size(), L = contrastive.size();
  if (traj.outcomes.size() != T) throw InvalidArgument("spce: designs and outcomes differ in length");
  Vec out(T + 1, 0.0);
  if (T == 0) return out;
  const std::span<const Theta> truth(&traj.theta, 1);
  Vec l0 = kernels::cumulative_logliks_serial(loglik, truth, traj.designs, traj.outcomes);
  Vec lc = parallel ? kernels::cumulative_logliks_parallel(loglik, contrastive, traj.designs, traj.outcomes)
                    : kernels::cumulative_logliks_serial(loglik, contrastive, traj.designs, traj.outcomes);
  for (double& v : l0) v = clamp_finite(v, clamped);
  for (double& v : lc) v = clamp_finite(v, clamped);
  const double log_n = std::log(static_cast<double>(L) + 1.0);
  for (std::size_t t = 0; t < T; ++t) {
    double m = l0[t];
    for (std::size_t l = 0; l < L; ++l) m = std::max(m, lc[l * T + t]);
    double s = std::exp(l0[t] - m);
    for (std::size_t l = 0; l < L; ++l) s += std::exp(lc[l * T + t] - m);
    // s >= 1 because the max term contributes exp(0), so the first term is <= 0.
    out[t + 1] = (l0[t] - m - std::log(s)) + log_n;
  }
  return out;
}

SpceResult spce_bound(const kernels::LoglikFn& loglik, const PriorFn& prior, std::span<const Trajectory> runs,
                      long L, std::uint64_t seed, bool parallel) {
  if (L < 0) throw InvalidArgument("spce: L must be >= 0");
  SpceResult res;
  res.cap = std::log(static_cast<double>(L) + 1.0);
  std::vector<Theta> contrastive(static_cast<std::size_t>(L));
  for (std::size_t r = 0; r < runs.size(); ++r) {
    Rng rng = make_stream(seed, {static_cast<std::uint64_t>(r)});
    for (auto& th : contrastive) th = prior(rng);
    res.per_run.push_back(spce_single(loglik, runs[r], contrastive, parallel, &res.clamped));
  }
  if (res.per_run.size() >= 2) res.curve = summarize(res.per_run);
  return res;
}

kernels::LoglikFn task_loglik(const TaskDefinition& task) {
  return [task](const Theta& th, const Design& x, const Observation& y) { return log_likelihood(task, th, x, y); };
}

PriorFn task_prior(const TaskDefinition& task) {
  return [task](Rng& rng) { return sample_theta(task, rng); };
}

double ConjugateGaussianToy::eig() const {
  return 0.5 * std::log1p(prior_sd * prior_sd / (noise_sd * noise_sd));
}

kernels::LoglikFn ConjugateGaussianToy::loglik() const {
  const double s = noise_sd;
  return [s](const Theta& th, const Design& x, const Observation& y) {
    return log_normal_pdf(y.y[0], th.values[0] * x.x[0], s);
  };
}

PriorFn ConjugateGaussianToy::prior() const {
  const double s = prior_sd;
  return [s](Rng& rng) { return Theta{{normal(rng, 0.0, s)}}; };
}

Trajectory ConjugateGaussianToy::simulate(Rng& rng) const {
  Trajectory t;
  t.theta = Theta{{normal(rng, 0.0, prior_sd)}};
  t.designs = {Design{{1.0}}};
  t.outcomes = {Observation{{t.theta.values[0] + normal(rng, 0.0, noise_sd)}}};
  return t;
}

}  // namespace aline
