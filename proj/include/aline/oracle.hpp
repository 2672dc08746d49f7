#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aline/types.hpp"

namespace aline::oracle {

/// (design index, binary outcome) pairs in acquisition order.
using ToyHistory = std::vector<std::pair<int, int>>;

/// Fully enumerable problem: finite parameter grid, binary outcomes, small pool.
struct ToySpec {
  std::string name;
  std::vector<Vec> thetas;        // grid points, each of dimension L
  Vec prior;                      // pmf over grid points
  std::vector<Vec> p_design;      // p(y=1 | theta_i, x_j), [theta][design]
  int horizon = 1;
  std::vector<int> subset;        // target parameter indices S
  std::vector<Vec> p_target;      // p(y*=1 | theta_i, x*_m), [theta][target input]
  Vec target_weights;             // p_*(x*_m)
  /// pi(. | history) over `remaining` designs (same order); must sum to 1.
  std::function<Vec(const ToyHistory&, const std::vector<int>& remaining)> policy;
};

/// Distinct theta_S values of a spec, in first-seen grid order.
std::vector<Vec> subset_values(const ToySpec& spec);

/// Approximate posterior over the subset values for a history.
using SubsetQ = std::function<Vec(const ToyHistory&)>;
/// Approximate q(y*=1 | x*_m, history).
using PredictiveQ = std::function<double(const ToyHistory&, int m)>;

struct Report {
  double seig = 0.0, seig_alt = 0.0;  // expectation over (theta, D) and over D of entropy reduction
  double j = 0.0, j_alt = 0.0;
  double expected_kl = 0.0;
  double sepig = 0.0, sepig_alt = 0.0;
  double j_pred = 0.0;
  double expected_kl_pred = 0.0;
  std::size_t trajectories = 0;
};

class EnumerationTooLarge : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Exact quantities by enumerating all trajectories. Caps: 4 designs, T <= 2.
Report evaluate(const ToySpec& spec, const SubsetQ& q, const PredictiveQ& q_pred);

/// Exact posterior over subset values and exact predictive, as q functions.
SubsetQ exact_subset_q(const ToySpec& spec);
PredictiveQ exact_predictive_q(const ToySpec& spec);
SubsetQ prior_subset_q(const ToySpec& spec);
PredictiveQ prior_predictive_q(const ToySpec& spec);
/// Mixture (1-w) exact + w * fixed distortion that depends on the history.
SubsetQ perturbed_subset_q(const ToySpec& spec, double w, unsigned salt);
PredictiveQ perturbed_predictive_q(const ToySpec& spec, double w, unsigned salt);
/// Product of the exact per-parameter marginals (a mean-field q).
SubsetQ mean_field_q(const ToySpec& spec);

std::vector<ToySpec> bundled_specs();

struct CheckResult {
  std::string spec;
  std::string q_name;
  Report report;
  bool passed = false;
  std::string detail;
};

/// Runs every bundled spec against exact, prior, mean-field and perturbed q.
std::vector<CheckResult> run_suite(double tol = 1e-10);

}  // namespace aline::oracle
