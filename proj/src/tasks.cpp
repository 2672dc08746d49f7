#include "aline/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aline/math.hpp"

namespace aline {

void validate_target(const TargetSpecifier& target, int param_dim) {
  if (target.is_subset()) {
    const auto& s = target.subset().indices;
    if (s.empty()) throw InvalidArgument("parameter subset must be nonempty");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0 || s[i] >= param_dim)
        throw InvalidArgument("parameter index " + std::to_string(s[i]) + " out of range");
      if (i > 0 && s[i] <= s[i - 1])
        throw InvalidArgument("parameter subset must be strictly increasing");
    }
  } else {
    const auto& p = target.predictive();
    if (p.inputs.empty()) throw InvalidArgument("predictive target needs at least one input");
    if (!p.outcomes.empty() && p.outcomes.size() != p.inputs.size())
      throw InvalidArgument("predictive outcomes must match inputs");
  }
}

void TaskDefinition::validate() const {
  if (param_dim < 1 || design_dim < 1 || outcome_dim < 1)
    throw InvalidArgument(name + ": dimensions must be positive");
  if (pool_size < 1) throw InvalidArgument(name + ": pool_size must be >= 1");
  if (horizon < 1) throw InvalidArgument(name + ": horizon must be >= 1");
  if (target_count < 1) throw InvalidArgument(name + ": target_count must be >= 1");
  if (static_cast<int>(param_names.size()) != param_dim ||
      static_cast<int>(prior_bounds.size()) != param_dim ||
      static_cast<int>(param_encoding.size()) != param_dim)
    throw InvalidArgument(name + ": per-parameter tables must have param_dim entries");
  if (static_cast<int>(design_lo.size()) != design_dim ||
      static_cast<int>(design_hi.size()) != design_dim ||
      static_cast<int>(design_encoding.size()) != design_dim)
    throw InvalidArgument(name + ": per-dimension tables must have design_dim entries");
  if (target_config.empty()) throw InvalidArgument(name + ": empty target configuration");
  for (const auto& opt : target_config) {
    if (!(opt.weight > 0)) throw InvalidArgument(name + ": target weights must be positive");
    if (!opt.predictive()) validate_target(TargetSpecifier::subset_of(opt.subset), param_dim);
  }
}

namespace {

std::vector<Affine> uniform_affines(const std::vector<ParamSupport>& b) {
  std::vector<Affine> out;
  for (const auto& s : b) out.push_back({0.5 * (s.lo + s.hi), 0.5 * (s.hi - s.lo)});
  return out;
}

TaskDefinition gp_task(int d) {
  TaskDefinition t;
  t.name = d == 1 ? "gp1d" : "gp2d";
  t.kind = TaskKind::GpFunction;
  t.design_dim = d;
  t.param_dim = d + 1;
  const double sq = std::sqrt(static_cast<double>(d));
  for (int i = 0; i < d; ++i) {
    t.param_names.push_back(d == 1 ? "lengthscale" : "lengthscale_" + std::to_string(i + 1));
    t.prior_bounds.push_back({"uniform(0.1,2)*sqrt(d)", 0.1 * sq, 2.0 * sq});
  }
  t.param_names.push_back("output_scale");
  t.prior_bounds.push_back({"uniform(0.1,1)", 0.1, 1.0});
  t.param_encoding = uniform_affines(t.prior_bounds);
  t.pool_size = 500;
  t.horizon = d == 1 ? 30 : 50;
  t.target_count = 100;
  std::vector<int> all(t.param_dim);
  std::iota(all.begin(), all.end(), 0);
  t.target_config = {{{}, 0.5}, {all, 0.5}};
  t.design_lo.assign(d, -5.0);
  t.design_hi.assign(d, 5.0);
  t.design_encoding.assign(d, Affine{0.0, 5.0});
  return t;
}

TaskDefinition location_finding_task() {
  TaskDefinition t;
  t.name = "location_finding";
  t.kind = TaskKind::LocationFinding;
  t.param_dim = 2;
  t.design_dim = 2;
  t.param_names = {"source_x", "source_y"};
  t.prior_bounds = {{"uniform(0,1)", 0.0, 1.0}, {"uniform(0,1)", 0.0, 1.0}};
  t.param_encoding = uniform_affines(t.prior_bounds);
  t.pool_size = 2000;
  t.horizon = 30;
  t.target_count = 100;
  t.target_config = {{{0, 1}, 1.0}};
  t.design_lo = {0.0, 0.0};
  t.design_hi = {1.0, 1.0};
  t.design_encoding = {{0.5, 0.5}, {0.5, 0.5}};
  t.outcome_transform = OutcomeTransform::Log;
  t.outcome_encoding = {1.5, 2.0};
  return t;
}

TaskDefinition ces_task() {
  TaskDefinition t;
  t.name = "ces";
  t.kind = TaskKind::Ces;
  t.param_dim = 5;
  t.design_dim = 2 * ces::kGoods;
  t.param_names = {"rho", "alpha_1", "alpha_2", "alpha_3", "log_u"};
  const double inf = std::numeric_limits<double>::infinity();
  t.prior_bounds = {{"beta(1,1)", 0.0, 1.0},
                    {"dirichlet(1,1,1)", 0.0, 1.0},
                    {"dirichlet(1,1,1)", 0.0, 1.0},
                    {"dirichlet(1,1,1)", 0.0, 1.0},
                    {"normal(1,3)", -inf, inf}};
  t.param_encoding = {{0.5, 0.5}, {1.0 / 3, 0.25}, {1.0 / 3, 0.25}, {1.0 / 3, 0.25}, {1.0, 3.0}};
  t.pool_size = 2000;
  t.horizon = 10;
  t.target_count = 100;
  t.target_config = {{{0, 1, 2, 3, 4}, 1.0}};
  t.design_lo.assign(t.design_dim, 0.0);
  t.design_hi.assign(t.design_dim, 100.0);
  t.design_encoding.assign(t.design_dim, Affine{50.0, 50.0});
  t.outcome_transform = OutcomeTransform::Logit;
  t.outcome_encoding = {0.0, 5.0};
  return t;
}

TaskDefinition psychometric_task() {
  TaskDefinition t;
  t.name = "psychometric";
  t.kind = TaskKind::Psychometric;
  t.param_dim = 4;
  t.design_dim = 1;
  t.param_names = {"threshold", "slope", "guess_rate", "lapse_rate"};
  t.prior_bounds = {{"uniform(-3,3)", -3.0, 3.0},
                    {"uniform(0.1,2)", 0.1, 2.0},
                    {"uniform(0.1,0.9)", 0.1, 0.9},
                    {"uniform(0,0.5)", 0.0, 0.5}};
  t.param_encoding = uniform_affines(t.prior_bounds);
  t.pool_size = 200;
  t.horizon = 30;
  t.target_count = 100;
  t.target_config = {{{0, 1}, 0.4}, {{2, 3}, 0.4}, {{0, 1, 2, 3}, 0.2}};
  t.binary_outcome = true;
  t.equispaced_pool = true;
  t.design_lo = {-5.0};
  t.design_hi = {5.0};
  t.design_encoding = {{0.0, 5.0}};
  t.outcome_encoding = {0.5, 0.5};
  return t;
}

double sample_gamma(Rng& rng, double shape) {
  return std::gamma_distribution<double>(shape, 1.0)(rng);
}

Design uniform_design(const TaskDefinition& task, Rng& rng) {
  Design d;
  d.x.resize(task.design_dim);
  for (int i = 0; i < task.design_dim; ++i) d.x[i] = uniform(rng, task.design_lo[i], task.design_hi[i]);
  return d;
}

}  // namespace

std::vector<std::string> task_names() {
  return {"gp1d", "gp2d", "location_finding", "ces", "psychometric"};
}

TaskDefinition make_task(const std::string& name) {
  TaskDefinition t;
  if (name == "gp1d") t = gp_task(1);
  else if (name == "gp2d") t = gp_task(2);
  else if (name == "location_finding") t = location_finding_task();
  else if (name == "ces") t = ces_task();
  else if (name == "psychometric") t = psychometric_task();
  else throw UnknownTask(name);
  t.validate();
  return t;
}

// --- GP prior ---------------------------------------------------------------

KernelSpec sample_gp_hyper(int design_dim, Rng& rng) {
  KernelSpec k;
  k.kind = static_cast<KernelKind>(std::uniform_int_distribution<int>(0, 2)(rng));
  k.output_scale = uniform(rng, 0.1, 1.0);
  const double sq = std::sqrt(static_cast<double>(design_dim));
  const bool isotropic = design_dim == 1 || uniform(rng) < 0.5;
  k.lengthscales.resize(design_dim);
  if (isotropic) {
    std::fill(k.lengthscales.begin(), k.lengthscales.end(), uniform(rng, 0.1, 2.0) * sq);
  } else {
    for (auto& l : k.lengthscales) l = uniform(rng, 0.1, 2.0) * sq;
  }
  return k;
}

Vec sample_gp_values(const KernelSpec& kernel, std::span<const Design> points, Rng& rng) {
  const std::size_t n = points.size();
  if (n == 0) return {};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return points[a].x < points[b].x; });
  std::vector<Design> unique;
  std::vector<std::size_t> slot(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = points[order[i]];
    if (unique.empty() || !(unique.back() == p)) unique.push_back(p);
    slot[order[i]] = unique.size() - 1;
  }

  const Eigen::MatrixXd k = gram(kernel, unique, unique);
  const auto m = static_cast<Eigen::Index>(unique.size());
  for (double jitter = 1e-8; jitter <= 1e-4 * 1.0001; jitter *= 10.0) {
    Eigen::LLT<Eigen::MatrixXd> llt(k + jitter * Eigen::MatrixXd::Identity(m, m));
    if (llt.info() != Eigen::Success) continue;
    Eigen::VectorXd z(m);
    for (Eigen::Index i = 0; i < m; ++i) z[i] = normal(rng);
    const Eigen::VectorXd f = llt.matrixL() * z;
    Vec out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f[static_cast<Eigen::Index>(slot[i])];
    return out;
  }
  throw CholeskyFailure("GP Gram matrix not positive definite after jitter 1e-4");
}

GpFunctionDraw sample_gp_function(int design_dim, std::span<const Design> pool,
                                  std::span<const Design> targets, Rng& rng) {
  if (pool.empty() && targets.empty()) throw InvalidArgument("sample_gp_function: no points");
  GpFunctionDraw draw;
  draw.kernel = sample_gp_hyper(design_dim, rng);
  std::vector<Design> all(pool.begin(), pool.end());
  all.insert(all.end(), targets.begin(), targets.end());
  const Vec f = sample_gp_values(draw.kernel, all, rng);
  draw.pool_values.assign(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(pool.size()));
  draw.target_values.assign(f.begin() + static_cast<std::ptrdiff_t>(pool.size()), f.end());
  return draw;
}

// --- Parametric simulators --------------------------------------------------

double location_finding::intensity(const Theta& theta, const Design& x) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.x.size(); ++i) {
    const double d = theta.values[i] - x.x[i];
    d2 += d * d;
  }
  return kBackground + kStrength / (kMaxSignal + d2);
}

Observation location_finding_simulate(const Theta& theta, const Design& x, Rng& rng,
                                      double noise_sd) {
  const double log_mu = std::log(location_finding::intensity(theta, x));
  const double eps = normal(rng);
  return Observation{{std::exp(log_mu + noise_sd * eps)}};
}

double ces::utility(double rho, std::span<const double> alpha, std::span<const double> basket) {
  // U = (sum alpha_i z_i^rho)^(1/rho) computed as exp(log(sum)/rho).
  bool all_positive = true;
  for (std::size_t i = 0; i < basket.size(); ++i)
    if (!(basket[i] > 0) && alpha[i] > 0) all_positive = false;
  if (all_positive) {
    // With sum(alpha) = 1, log(sum alpha_i e^{rho l_i}) = log1p(sum alpha_i expm1(rho l_i)),
    // which stays accurate as rho -> 0.
    double acc = 0.0, asum = 0.0;
    for (std::size_t i = 0; i < basket.size(); ++i) {
      if (alpha[i] <= 0) continue;
      acc += alpha[i] * std::expm1(rho * std::log(basket[i]));
      asum += alpha[i];
    }
    const double log_sum = std::log1p(acc + (asum - 1.0));
    return std::exp(log_sum / rho);
  }
  double terms[16];
  std::size_t n = 0;
  for (std::size_t i = 0; i < basket.size(); ++i) {
    if (alpha[i] <= 0 || basket[i] <= 0) continue;
    terms[n++] = std::log(alpha[i]) + rho * std::log(basket[i]);
  }
  if (n == 0) return 0.0;
  const double lse = logsumexp(std::span<const double>(terms, n));
  return std::exp(lse / rho);
}

std::pair<double, double> ces::eta_moments(const Theta& theta, const Design& x) {
  const double rho = theta.values[0];
  const std::span<const double> alpha(theta.values.data() + 1, kGoods);
  const double u = std::exp(theta.values[4]);
  const std::span<const double> z(x.x.data(), kGoods);
  const std::span<const double> zp(x.x.data() + kGoods, kGoods);
  double dist2 = 0.0;
  for (int i = 0; i < kGoods; ++i) dist2 += (z[i] - zp[i]) * (z[i] - zp[i]);
  const double mean = u * (utility(rho, alpha, z) - utility(rho, alpha, zp));
  const double sd = u * kTau * (1.0 + std::sqrt(dist2));
  return {mean, sd};
}

Observation ces_simulate(const Theta& theta, const Design& x, Rng& rng) {
  const auto [mean, sd] = ces::eta_moments(theta, x);
  const double eta = mean + sd * normal(rng);
  const double y = std::clamp(sigmoid(eta), ces::kEps, 1.0 - ces::kEps);
  return Observation{{y}};
}

double psychometric_prob(const Theta& theta, const Design& x) {
  const auto& t = theta.values;
  const double z = (x.x[0] - t[0]) / t[1];
  const double f = -std::expm1(-std::pow(10.0, z));
  return t[2] * t[3] + (1.0 - t[3]) * f;
}

// --- Generic operations -----------------------------------------------------

Theta sample_theta(const TaskDefinition& task, Rng& rng) {
  Theta th;
  switch (task.kind) {
    case TaskKind::GpFunction: {
      const KernelSpec k = sample_gp_hyper(task.design_dim, rng);
      th.values = k.lengthscales;
      th.values.push_back(k.output_scale);
      break;
    }
    case TaskKind::LocationFinding:
      th.values = {uniform(rng), uniform(rng)};
      break;
    case TaskKind::Ces: {
      double rho = 0.0;
      while (!(rho > 0.0)) {
        const double a = sample_gamma(rng, 1.0);
        const double b = sample_gamma(rng, 1.0);
        rho = a / (a + b);
      }
      double g[ces::kGoods];
      double s = 0.0;
      for (double& v : g) s += (v = sample_gamma(rng, 1.0));
      const double a1 = g[0] / s, a2 = g[1] / s;
      th.values = {rho, a1, a2, 1.0 - (a1 + a2), normal(rng, 1.0, 3.0)};
      break;
    }
    case TaskKind::Psychometric:
      th.values = {uniform(rng, -3.0, 3.0), uniform(rng, 0.1, 2.0), uniform(rng, 0.1, 0.9),
                   uniform(rng, 0.0, 0.5)};
      break;
  }
  return th;
}

Observation simulate(const TaskDefinition& task, const Theta& theta, const Design& x, Rng& rng) {
  switch (task.kind) {
    case TaskKind::LocationFinding: return location_finding_simulate(theta, x, rng);
    case TaskKind::Ces: return ces_simulate(theta, x, rng);
    case TaskKind::Psychometric: {
      const double p = psychometric_prob(theta, x);
      return Observation{{uniform(rng) < p ? 1.0 : 0.0}};
    }
    case TaskKind::GpFunction: break;
  }
  throw InvalidArgument("simulate: GP outcomes are produced through an Episode");
}

double log_likelihood(const TaskDefinition& task, const Theta& theta, const Design& x,
                      const Observation& obs) {
  const double y = obs.y[0];
  switch (task.kind) {
    case TaskKind::LocationFinding:
      return log_normal_pdf(std::log(y), std::log(location_finding::intensity(theta, x)),
                            location_finding::kNoiseSd);
    case TaskKind::Ces: {
      const auto [mean, sd] = ces::eta_moments(theta, x);
      static const double lo = std::log(ces::kEps / (1.0 - ces::kEps));
      if (y <= ces::kEps) return log_ndtr((lo - mean) / sd);
      if (y >= 1.0 - ces::kEps) return log_ndtr((mean + lo) / sd);
      return log_normal_pdf(std::log(y / (1.0 - y)), mean, sd);
    }
    case TaskKind::Psychometric: {
      const double p = psychometric_prob(theta, x);
      return y > 0.5 ? std::log(p) : std::log1p(-p);
    }
    case TaskKind::GpFunction: break;
  }
  throw InvalidArgument("log_likelihood: not available for GP tasks");
}

TargetSpecifier sample_target_specifier(const TaskDefinition& task, Rng& rng) {
  if (task.target_config.empty()) throw InvalidArgument(task.name + ": empty target configuration");
  std::vector<double> w;
  for (const auto& o : task.target_config) w.push_back(o.weight);
  const auto& opt =
      task.target_config[std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng)];
  if (!opt.predictive()) return TargetSpecifier::subset_of(opt.subset);
  std::vector<Design> inputs;
  inputs.reserve(task.target_count);
  for (int m = 0; m < task.target_count; ++m) inputs.push_back(uniform_design(task, rng));
  return TargetSpecifier::predictive_at(std::move(inputs));
}

std::vector<Design> sample_query_pool(const TaskDefinition& task, int n, Rng& rng) {
  if (n < 1) throw InvalidArgument("query pool size must be >= 1");
  std::vector<Design> pool;
  pool.reserve(n);
  if (task.equispaced_pool) {
    for (int i = 0; i < n; ++i) {
      Design d;
      for (int k = 0; k < task.design_dim; ++k) {
        const double lo = task.design_lo[k], hi = task.design_hi[k];
        d.x.push_back(n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1));
      }
      pool.push_back(std::move(d));
    }
    return pool;
  }
  for (int i = 0; i < n; ++i) pool.push_back(uniform_design(task, rng));
  return pool;
}

bool design_in_space(const TaskDefinition& task, const Design& x) {
  if (static_cast<int>(x.x.size()) != task.design_dim) return false;
  for (int i = 0; i < task.design_dim; ++i)
    if (!(x.x[i] >= task.design_lo[i] && x.x[i] <= task.design_hi[i])) return false;
  return true;
}

bool outcome_valid(const TaskDefinition& task, const Observation& o) {
  if (static_cast<int>(o.y.size()) != task.outcome_dim) return false;
  const double y = o.y[0];
  if (!std::isfinite(y)) return false;
  switch (task.kind) {
    case TaskKind::Psychometric: return y == 0.0 || y == 1.0;
    case TaskKind::Ces: return y >= ces::kEps && y <= 1.0 - ces::kEps;
    case TaskKind::LocationFinding: return y > 0.0;
    case TaskKind::GpFunction: return true;
  }
  return true;
}

Observation Episode::observe(const TaskDefinition& task, std::size_t i, Rng& rng) const {
  if (gp) return Observation{{gp->pool_values.at(i) + gp->noise_std * normal(rng)}};
  return simulate(task, theta, pool.at(i), rng);
}

Episode sample_episode(const TaskDefinition& task, Rng& rng, int pool_size,
                       const std::optional<TargetSpecifier>& fixed_target) {
  Episode ep;
  ep.target = fixed_target ? *fixed_target : sample_target_specifier(task, rng);
  validate_target(ep.target, task.param_dim);
  ep.pool = sample_query_pool(task, pool_size, rng);

  std::span<const Design> target_inputs;
  if (ep.target.is_predictive()) target_inputs = ep.target.predictive().inputs;

  if (task.kind == TaskKind::GpFunction) {
    ep.gp = sample_gp_function(task.design_dim, ep.pool, target_inputs, rng);
    ep.theta.values = ep.gp->kernel.lengthscales;
    if (static_cast<int>(ep.theta.values.size()) < task.design_dim)
      ep.theta.values.assign(task.design_dim, ep.gp->kernel.lengthscales[0]);
    ep.theta.values.push_back(ep.gp->kernel.output_scale);
  } else {
    ep.theta = sample_theta(task, rng);
  }

  if (ep.target.is_subset()) {
    for (int l : ep.target.subset().indices) ep.target_values.push_back(ep.theta.values[l]);
  } else {
    auto& pred = ep.target.predictive();
    pred.outcomes.clear();
    for (std::size_t m = 0; m < pred.inputs.size(); ++m) {
      Observation o = ep.gp ? Observation{{ep.gp->target_values[m] + ep.gp->noise_std * normal(rng)}}
                            : simulate(task, ep.theta, pred.inputs[m], rng);
      ep.target_values.push_back(o.y[0]);
      pred.outcomes.push_back(std::move(o));
    }
  }
  return ep;
}

// --- Standardization --------------------------------------------------------

Vec encode_design(const TaskDefinition& task, const Design& x) {
  if (static_cast<int>(x.x.size()) != task.design_dim)
    throw InvalidArgument("design dimension mismatch");
  Vec out(task.design_dim);
  for (int i = 0; i < task.design_dim; ++i) out[i] = task.design_encoding[i].forward(x.x[i]);
  return out;
}

namespace {
double apply_transform(OutcomeTransform t, double y) {
  switch (t) {
    case OutcomeTransform::Identity: return y;
    case OutcomeTransform::Log: return std::log(y);
    case OutcomeTransform::Logit: return std::log(y / (1.0 - y));
  }
  return y;
}
}  // namespace

double encode_outcome(const TaskDefinition& task, double y) {
  return task.outcome_encoding.forward(apply_transform(task.outcome_transform, y));
}

double encode_param(const TaskDefinition& task, int index, double value) {
  return task.param_encoding.at(index).forward(value);
}

Affine target_affine(const TaskDefinition& task, const TargetSpecifier& target, std::size_t i) {
  if (target.is_subset()) return task.param_encoding.at(target.subset().indices.at(i));
  return task.outcome_encoding;
}

double target_transform(const TaskDefinition& task, const TargetSpecifier& target, double raw) {
  if (target.is_subset()) return raw;
  return apply_transform(task.outcome_transform, raw);
}

}  // namespace aline
