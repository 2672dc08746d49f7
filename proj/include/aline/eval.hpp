#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "aline/model.hpp"
#include "aline/spce.hpp"
#include "aline/stats.hpp"
#include "aline/tasks.hpp"
#include "json.hpp"

namespace aline {

enum class PolicyKind { Aline, Random, AlineUs, GpUs, GpVr, GpEpig };

std::string policy_name(PolicyKind p);
PolicyKind parse_policy(const std::string& name);
bool policy_needs_model(PolicyKind p);

/// Network inputs from raw designs and outcomes.
template <class T>
ModelInputs<T> model_inputs(const TaskDefinition& task, std::span<const HistoryPair> history,
                            std::span<const Design> queries, const TargetSpecifier& target);

/// Mixture for target token i in raw units (parameters, or transformed outcomes).
GmmParams raw_gmm(const TaskDefinition& task, const TargetSpecifier& target, const GmmParams& net, std::size_t i);

struct EvalConfig {
  int n_runs = 100;
  int horizon = 10;
  int pool_size = 500;
  long spce_contrastive = 10000;  // L
  int grid_size = 100;            // RMSE grid points (per axis for 2D tasks: sqrt)
  std::uint64_t seed = 0;
  SelectMode mode = SelectMode::Argmax;
  /// Overrides the task's target distribution for every run.
  std::optional<TargetSpecifier> target;
  bool parallel = true;
};

/// One evaluation run: the episode plus what each step acquired.
struct RunRecord {
  Episode episode;
  std::vector<std::size_t> pool_indices;
  History history;
};

/// Rolls out `policy` on a fixed episode. `params` may be null for policies
/// that do not use the network.
template <class T>
RunRecord rollout_policy(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                         Episode episode, int horizon, SelectMode mode, Rng& obs_rng, Rng& policy_rng);

/// Episodes and rollouts for run r use streams (seed, r, 0|1|2), so every
/// policy sees the same problem instances.
template <class T>
std::vector<RunRecord> rollout_runs(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                                    const EvalConfig& cfg);

struct EvalReport {
  std::string task;
  std::string policy;
  std::size_t runs = 0;
  int horizon = 0;
  std::optional<MetricCurve> rmse, log_prob, spce;
  long spce_contrastive = 0;
  long spce_clamped = 0;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Evenly spaced grid over the design box (100 points in 1D, 10x10 in 2D).
std::vector<Design> evaluation_grid(const TaskDefinition& task, int n);

/// RMSE of the predictive means on the grid against the latent function, for
/// t = 0..T. GP policies predict with the fitted GP, the others with the network.
struct RmseDump {
  std::vector<std::vector<Vec>> predictions;  // [run][step][grid point]
  std::vector<Vec> truth;                     // [run][grid point]
};

template <class T>
EvalReport rmse_eval(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                     const EvalConfig& cfg, RmseDump* dump = nullptr);

/// RMSE of predictions against truth; exposed for recomputation.
double rmse(std::span<const double> predicted, std::span<const double> truth);

/// Mean log q of the true parameters in raw units over the target subset.
template <class T>
EvalReport log_prob_eval(const ModelParams<T>& params, const TaskDefinition& task, PolicyKind policy,
                         const EvalConfig& cfg);

/// sPCE lower bound with L contrastive prior draws.
template <class T>
EvalReport spce_eval(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                     const EvalConfig& cfg);

/// Line plot of metric curves with shaded 95% intervals.
std::string render_svg(const std::string& title, const std::string& ylabel,
                       const std::vector<std::pair<std::string, MetricCurve>>& curves);

}  // namespace aline
