#include "aline/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace aline::oracle {

namespace {

double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

double entropy(const Vec& p) {
  double h = 0.0;
  for (double v : p) h -= xlogy(v, v);
  return h;
}

double bern_entropy(double p) { return entropy({p, 1.0 - p}); }

void validate(const ToySpec& s) {
  const std::size_t n = s.thetas.size();
  if (n == 0 || s.prior.size() != n || s.p_design.size() != n)
    throw InvalidArgument(s.name + ": grid, prior and likelihood sizes differ");
  const std::size_t nd = s.p_design[0].size();
  if (nd == 0 || nd > 4) throw EnumerationTooLarge(s.name + ": pool must have 1..4 designs");
  if (s.horizon < 1 || s.horizon > 2 || s.horizon > static_cast<int>(nd))
    throw EnumerationTooLarge(s.name + ": horizon must be 1 or 2 and fit the pool");
  if (s.subset.empty()) throw InvalidArgument(s.name + ": empty subset");
  for (int l : s.subset)
    if (l < 0 || l >= static_cast<int>(s.thetas[0].size())) throw InvalidArgument(s.name + ": bad subset index");
  if (!s.policy) throw InvalidArgument(s.name + ": missing policy");
  if (!s.p_target.empty() && s.p_target[0].size() != s.target_weights.size())
    throw InvalidArgument(s.name + ": target tables differ in size");
}

Vec project(const ToySpec& s, const Vec& theta) {
  Vec v;
  for (int l : s.subset) v.push_back(theta[l]);
  return v;
}

std::vector<int> subset_index(const ToySpec& s, const std::vector<Vec>& values) {
  std::vector<int> idx;
  for (const auto& th : s.thetas) {
    const Vec v = project(s, th);
    idx.push_back(static_cast<int>(std::find(values.begin(), values.end(), v) - values.begin()));
  }
  return idx;
}

/// A complete trajectory with its policy probability and per-theta likelihood.
struct Path {
  ToyHistory history;
  double policy_prob = 1.0;
  Vec lik;  // p(y_1:T | theta_i, x_1:T)
};

void enumerate(const ToySpec& s, ToyHistory& h, std::vector<int>& remaining, double pp, Vec lik,
               std::vector<Path>& out) {
  if (static_cast<int>(h.size()) == s.horizon) {
    out.push_back({h, pp, std::move(lik)});
    return;
  }
  const Vec pi = s.policy(h, remaining);
  if (pi.size() != remaining.size()) throw InvalidArgument(s.name + ": policy returned wrong size");
  for (std::size_t j = 0; j < remaining.size(); ++j) {
    if (pi[j] == 0.0) continue;
    const int x = remaining[j];
    std::vector<int> rest = remaining;
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(j));
    for (int y = 0; y <= 1; ++y) {
      Vec l2 = lik;
      for (std::size_t i = 0; i < l2.size(); ++i) l2[i] *= y ? s.p_design[i][x] : 1.0 - s.p_design[i][x];
      h.push_back({x, y});
      enumerate(s, h, rest, pp * pi[j], std::move(l2), out);
      h.pop_back();
    }
  }
}

std::vector<Path> all_paths(const ToySpec& s) {
  std::vector<Path> out;
  ToyHistory h;
  std::vector<int> remaining(s.p_design[0].size());
  for (std::size_t j = 0; j < remaining.size(); ++j) remaining[j] = static_cast<int>(j);
  enumerate(s, h, remaining, 1.0, Vec(s.thetas.size(), 1.0), out);
  return out;
}

/// Posterior over grid points given the likelihood of a path, up to the policy factor.
Vec grid_posterior(const ToySpec& s, const Vec& lik) {
  Vec p(s.thetas.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = s.prior[i] * lik[i]);
  for (double& v : p) v /= z;
  return p;
}

Vec likelihood_of(const ToySpec& s, const ToyHistory& h) {
  Vec lik(s.thetas.size(), 1.0);
  for (const auto& [x, y] : h)
    for (std::size_t i = 0; i < lik.size(); ++i) lik[i] *= y ? s.p_design[i][x] : 1.0 - s.p_design[i][x];
  return lik;
}

Vec marginalize(const Vec& grid_p, const std::vector<int>& idx, std::size_t n_values) {
  Vec m(n_values, 0.0);
  for (std::size_t i = 0; i < grid_p.size(); ++i) m[idx[i]] += grid_p[i];
  return m;
}

double predictive(const ToySpec& s, const Vec& grid_p, int m) {
  double p = 0.0;
  for (std::size_t i = 0; i < grid_p.size(); ++i) p += grid_p[i] * s.p_target[i][m];
  return p;
}

// Deterministic pseudo-random value in (0,1) from a history and salt.
double hash_unit(const ToyHistory& h, unsigned salt, unsigned k) {
  std::uint64_t x = 0x9e3779b97f4a7c15ULL ^ (static_cast<std::uint64_t>(salt) << 32) ^ k;
  for (const auto& [d, y] : h) x = (x ^ static_cast<std::uint64_t>(d * 2 + y + 1)) * 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 31;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 29;
  return (static_cast<double>(x >> 11) + 0.5) / 9007199254740992.0;
}

}  // namespace

std::vector<Vec> subset_values(const ToySpec& spec) {
  std::vector<Vec> values;
  for (const auto& th : spec.thetas) {
    Vec v = project(spec, th);
    if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(std::move(v));
  }
  return values;
}

Report evaluate(const ToySpec& s, const SubsetQ& q, const PredictiveQ& q_pred) {
  validate(s);
  const auto values = subset_values(s);
  const auto idx = subset_index(s, values);
  const Vec prior_s = marginalize(s.prior, idx, values.size());
  const double h_prior = entropy(prior_s);
  const auto paths = all_paths(s);
  const bool pred = !s.p_target.empty();

  Report r;
  r.trajectories = paths.size();
  for (const auto& path : paths) {
    const Vec post = grid_posterior(s, path.lik);
    const Vec post_s = marginalize(post, idx, values.size());
    const Vec qs = q(path.history);
    if (qs.size() != values.size()) throw InvalidArgument(s.name + ": q returned wrong size");
    double p_d = 0.0;  // p(D_T | pi)
    for (std::size_t i = 0; i < post.size(); ++i) p_d += s.prior[i] * path.lik[i];
    p_d *= path.policy_prob;

    // Expectation over p(theta) p(D | theta, pi), summing over theta explicitly.
    for (std::size_t i = 0; i < s.thetas.size(); ++i) {
      const double w = s.prior[i] * path.lik[i] * path.policy_prob;
      if (w == 0.0) continue;
      r.seig += w * std::log(post_s[idx[i]]);
      r.j += w * std::log(qs[idx[i]]);
    }
    // Expectation over p(D | pi) with posterior-weighted inner sums.
    double kl = 0.0, plogq = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      kl += xlogy(post_s[k], post_s[k]) - xlogy(post_s[k], qs[k]);
      plogq += xlogy(post_s[k], qs[k]);
    }
    r.seig_alt += p_d * (h_prior - entropy(post_s));
    r.j_alt += p_d * (plogq + h_prior);
    r.expected_kl += p_d * kl;

    if (pred) {
      for (std::size_t m = 0; m < s.target_weights.size(); ++m) {
        const double pw = s.target_weights[m];
        const double pm = predictive(s, post, static_cast<int>(m));
        const double qm = q_pred(path.history, static_cast<int>(m));
        const double h0 = bern_entropy(predictive(s, s.prior, static_cast<int>(m)));
        r.sepig_alt += pw * p_d * (h0 - bern_entropy(pm));
        r.expected_kl_pred +=
            pw * p_d * (xlogy(pm, pm) - xlogy(pm, qm) + xlogy(1 - pm, 1 - pm) - xlogy(1 - pm, 1 - qm));
        for (std::size_t i = 0; i < s.thetas.size(); ++i) {
          const double w = s.prior[i] * path.lik[i] * path.policy_prob * pw;
          if (w == 0.0) continue;
          const double pt = s.p_target[i][m];
          r.sepig += w * (xlogy(pt, pm) + xlogy(1 - pt, 1 - pm));
          r.j_pred += w * (xlogy(pt, qm) + xlogy(1 - pt, 1 - qm));
        }
      }
    }
  }
  r.seig += h_prior;
  r.j += h_prior;
  if (pred) {
    double hstar = 0.0;
    for (std::size_t m = 0; m < s.target_weights.size(); ++m)
      hstar += s.target_weights[m] * bern_entropy(predictive(s, s.prior, static_cast<int>(m)));
    r.sepig += hstar;
    r.j_pred += hstar;
  }
  return r;
}

SubsetQ exact_subset_q(const ToySpec& s) {
  const auto values = subset_values(s);
  const auto idx = subset_index(s, values);
  return [s, idx, n = values.size()](const ToyHistory& h) {
    return marginalize(grid_posterior(s, likelihood_of(s, h)), idx, n);
  };
}

PredictiveQ exact_predictive_q(const ToySpec& s) {
  return [s](const ToyHistory& h, int m) { return predictive(s, grid_posterior(s, likelihood_of(s, h)), m); };
}

SubsetQ prior_subset_q(const ToySpec& s) {
  const auto values = subset_values(s);
  const Vec p = marginalize(s.prior, subset_index(s, values), values.size());
  return [p](const ToyHistory&) { return p; };
}

PredictiveQ prior_predictive_q(const ToySpec& s) {
  return [s](const ToyHistory&, int m) { return predictive(s, s.prior, m); };
}

SubsetQ perturbed_subset_q(const ToySpec& s, double w, unsigned salt) {
  const SubsetQ exact = exact_subset_q(s);
  return [exact, w, salt](const ToyHistory& h) {
    Vec p = exact(h);
    Vec d(p.size());
    double z = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) z += (d[k] = hash_unit(h, salt, static_cast<unsigned>(k)));
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = (1.0 - w) * p[k] + w * d[k] / z;
    return p;
  };
}

PredictiveQ perturbed_predictive_q(const ToySpec& s, double w, unsigned salt) {
  const PredictiveQ exact = exact_predictive_q(s);
  return [exact, w, salt](const ToyHistory& h, int m) {
    return (1.0 - w) * exact(h, m) + w * hash_unit(h, salt, static_cast<unsigned>(m) + 101u);
  };
}

SubsetQ mean_field_q(const ToySpec& s) {
  const auto values = subset_values(s);
  return [s, values](const ToyHistory& h) {
    const Vec post = grid_posterior(s, likelihood_of(s, h));
    Vec q(values.size(), 1.0);
    for (std::size_t k = 0; k < values.size(); ++k)
      for (std::size_t j = 0; j < s.subset.size(); ++j) {
        double marg = 0.0;
        for (std::size_t i = 0; i < post.size(); ++i)
          if (s.thetas[i][s.subset[j]] == values[k][j]) marg += post[i];
        q[k] *= marg;
      }
    double z = 0.0;
    for (double v : q) z += v;
    for (double& v : q) v /= z;
    return q;
  };
}

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Vec uniform_policy(const ToyHistory&, const std::vector<int>& remaining) {
  return Vec(remaining.size(), 1.0 / static_cast<double>(remaining.size()));
}

ToySpec psychometric_like() {
  // theta = (threshold, lapse); stimuli at -1, 0, 1, 2.
  ToySpec s;
  s.name = "threshold-lapse";
  const double xs[] = {-1.0, 0.0, 1.0, 2.0};
  for (double th : {-0.5, 0.5, 1.5})
    for (double lapse : {0.0, 0.2}) {
      s.thetas.push_back({th, lapse});
      Vec row;
      for (double x : xs) row.push_back(0.5 * lapse + (1.0 - lapse) * logistic(3.0 * (x - th)));
      s.p_design.push_back(row);
      s.p_target.push_back({0.5 * lapse + (1.0 - lapse) * logistic(3.0 * (0.5 - th)),
                            0.5 * lapse + (1.0 - lapse) * logistic(3.0 * (3.0 - th))});
    }
  s.prior = {0.1, 0.2, 0.25, 0.15, 0.2, 0.1};
  s.horizon = 2;
  s.subset = {0};
  s.target_weights = {0.7, 0.3};
  s.policy = uniform_policy;
  return s;
}

ToySpec nuisance_target() {
  ToySpec s = psychometric_like();
  s.name = "lapse-target-adaptive";
  s.subset = {1};
  // Prefers the extreme stimulus after a positive response.
  s.policy = [](const ToyHistory& h, const std::vector<int>& remaining) {
    Vec p(remaining.size(), 1.0);
    for (std::size_t j = 0; j < remaining.size(); ++j)
      if (remaining[j] == 3 && !h.empty() && h.back().second == 1) p[j] = 4.0;
    double z = 0.0;
    for (double v : p) z += v;
    for (double& v : p) v /= z;
    return p;
  };
  return s;
}

ToySpec joint_subset() {
  ToySpec s;
  s.name = "joint-two-parameter";
  for (double a : {0.1, 0.5, 0.9})
    for (double b : {0.2, 0.7}) {
      s.thetas.push_back({a, b});
      s.p_design.push_back({a, b, a * b, 0.5 * (a + b)});
      s.p_target.push_back({a * (1 - b) + 0.1});
    }
  s.prior = Vec(6, 1.0 / 6.0);
  s.horizon = 1;
  s.subset = {0, 1};
  s.target_weights = {1.0};
  s.policy = [](const ToyHistory&, const std::vector<int>& remaining) {
    Vec p(remaining.size(), 0.0);
    p[remaining.size() - 1] = 0.6;
    p[0] += 0.4;
    return p;
  };
  return s;
}

ToySpec deterministic_design() {
  ToySpec s;
  s.name = "greedy-three-design";
  for (double th : {0.0, 1.0, 2.0, 3.0}) {
    s.thetas.push_back({th});
    s.p_design.push_back({logistic(th - 1.0), logistic(2.0 * (th - 2.0)), logistic(0.5 - th)});
    s.p_target.push_back({logistic(th - 1.5), logistic(1.0 - th), logistic(2.0 * th - 3.0)});
  }
  s.prior = {0.4, 0.3, 0.2, 0.1};
  s.horizon = 2;
  s.subset = {0};
  s.target_weights = {0.2, 0.3, 0.5};
  s.policy = [](const ToyHistory& h, const std::vector<int>& remaining) {
    // Deterministic: first design 1, then design 0 if y=1 else the last remaining.
    Vec p(remaining.size(), 0.0);
    int want = h.empty() ? 1 : (h.back().second == 1 ? 0 : remaining.back());
    for (std::size_t j = 0; j < remaining.size(); ++j)
      if (remaining[j] == want) p[j] = 1.0;
    if (std::find(remaining.begin(), remaining.end(), want) == remaining.end()) p[0] = 1.0;
    return p;
  };
  return s;
}

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace

std::vector<ToySpec> bundled_specs() {
  return {psychometric_like(), nuisance_target(), joint_subset(), deterministic_design()};
}

std::vector<CheckResult> run_suite(double tol) {
  std::vector<CheckResult> out;
  for (const auto& spec : bundled_specs()) {
    const std::vector<std::pair<std::string, std::pair<SubsetQ, PredictiveQ>>> qs = {
        {"exact", {exact_subset_q(spec), exact_predictive_q(spec)}},
        {"prior", {prior_subset_q(spec), prior_predictive_q(spec)}},
        {"mean-field", {mean_field_q(spec), perturbed_predictive_q(spec, 0.1, 7)}},
        {"perturbed-0.05", {perturbed_subset_q(spec, 0.05, 1), perturbed_predictive_q(spec, 0.05, 2)}},
        {"perturbed-0.5", {perturbed_subset_q(spec, 0.5, 3), perturbed_predictive_q(spec, 0.5, 4)}},
    };
    for (const auto& [qname, qq] : qs) {
      CheckResult c{spec.name, qname, evaluate(spec, qq.first, qq.second), true, {}};
      const Report& r = c.report;
      std::ostringstream why;
      auto need = [&](bool ok, const char* what) {
        if (!ok) {
          c.passed = false;
          why << what << "; ";
        }
      };
      need(close(r.seig, r.seig_alt, tol), "sEIG routes disagree");
      need(close(r.j, r.j_alt, tol), "J routes disagree");
      need(r.j <= r.seig + tol, "J exceeds sEIG");
      need(close(r.seig - r.j, r.expected_kl, tol), "sEIG - J != E[KL]");
      need(close(r.sepig, r.sepig_alt, tol), "sEPIG routes disagree");
      need(r.j_pred <= r.sepig + tol, "J_pred exceeds sEPIG");
      need(close(r.sepig - r.j_pred, r.expected_kl_pred, tol), "sEPIG - J_pred != E[KL]");
      if (qname == "exact") {
        need(close(r.expected_kl, 0.0, tol) && close(r.j, r.seig, tol), "exact q has a gap");
        need(close(r.expected_kl_pred, 0.0, tol), "exact predictive q has a gap");
      }
      if (qname == "prior") {
        need(close(r.j, 0.0, tol), "prior q should give J = 0");
        need(close(r.expected_kl, r.seig, tol), "prior q gap should equal sEIG");
      }
      c.detail = why.str();
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace aline::oracle
