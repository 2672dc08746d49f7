#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aline/kernels_gp.hpp"
#include "aline/rng.hpp"
#include "aline/types.hpp"

namespace aline {

enum class TaskKind { GpFunction, LocationFinding, Ces, Psychometric };

class UnknownTask : public InvalidArgument {
 public:
  explicit UnknownTask(const std::string& name) : InvalidArgument("unknown task: " + name) {}
};

/// Maps a raw value to the standardized scale the network sees.
struct Affine {
  double shift = 0.0;
  double scale = 1.0;
  double forward(double v) const { return (v - shift) / scale; }
  double inverse(double z) const { return z * scale + shift; }
};

enum class OutcomeTransform { Identity, Log, Logit };

struct ParamSupport {
  std::string prior;  // human readable, e.g. "uniform(0,1)"
  double lo;
  double hi;
};

/// One entry of the discrete target distribution p(xi). An empty `subset`
/// means a predictive target.
struct TargetOption {
  std::vector<int> subset;
  double weight = 1.0;
  bool predictive() const { return subset.empty(); }
};

struct TaskDefinition {
  std::string name;
  TaskKind kind = TaskKind::GpFunction;
  int param_dim = 1;
  int design_dim = 1;
  int outcome_dim = 1;
  std::vector<std::string> param_names;
  std::vector<ParamSupport> prior_bounds;
  int pool_size = 1;
  int horizon = 1;
  int target_count = 1;  // M for predictive targets
  std::vector<TargetOption> target_config;
  bool binary_outcome = false;
  bool equispaced_pool = false;
  Vec design_lo;
  Vec design_hi;

  std::vector<Affine> design_encoding;
  OutcomeTransform outcome_transform = OutcomeTransform::Identity;
  Affine outcome_encoding;
  std::vector<Affine> param_encoding;

  /// Throws InvalidArgument when the definition breaks its invariants.
  void validate() const;
};

/// Registered task names: gp1d, gp2d, location_finding, ces, psychometric.
std::vector<std::string> task_names();
TaskDefinition make_task(const std::string& name);

// --- GP function prior ------------------------------------------------------

struct GpFunctionDraw {
  KernelSpec kernel;
  Vec pool_values;
  Vec target_values;
  double noise_std = 0.01;
};

class CholeskyFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Samples kernel family, amplitude and lengthscales from the synthetic
/// function prior.
KernelSpec sample_gp_hyper(int design_dim, Rng& rng);

/// Joint latent draw at the given points. Duplicate points receive identical
/// values and the draw is equivariant under permutation of `points`.
Vec sample_gp_values(const KernelSpec& kernel, std::span<const Design> points, Rng& rng);

GpFunctionDraw sample_gp_function(int design_dim, std::span<const Design> pool,
                                  std::span<const Design> targets, Rng& rng);

// --- Parametric simulators --------------------------------------------------

namespace location_finding {
inline constexpr double kBackground = 0.1;
inline constexpr double kMaxSignal = 1e-4;
inline constexpr double kStrength = 1.0;
inline constexpr double kNoiseSd = 0.5;
double intensity(const Theta& theta, const Design& x);
}  // namespace location_finding

Observation location_finding_simulate(const Theta& theta, const Design& x, Rng& rng,
                                      double noise_sd = location_finding::kNoiseSd);

namespace ces {
inline constexpr int kGoods = 3;
inline constexpr double kTau = 0.005;
inline constexpr double kEps = 1.0 / 4194304.0;  // 2^-22
/// CES utility evaluated in the log domain.
double utility(double rho, std::span<const double> alpha, std::span<const double> basket);
/// Mean and standard deviation of the latent utility difference eta.
std::pair<double, double> eta_moments(const Theta& theta, const Design& x);
}  // namespace ces

Observation ces_simulate(const Theta& theta, const Design& x, Rng& rng);

double psychometric_prob(const Theta& theta, const Design& x);

// --- Generic task operations ------------------------------------------------

Theta sample_theta(const TaskDefinition& task, Rng& rng);

/// Simulates one outcome for a parametric task. GP tasks are simulated
/// through an Episode because outcomes depend on the latent draw.
Observation simulate(const TaskDefinition& task, const Theta& theta, const Design& x, Rng& rng);

/// log p(y | theta, x) up to a theta-independent constant.
double log_likelihood(const TaskDefinition& task, const Theta& theta, const Design& x,
                      const Observation& y);

TargetSpecifier sample_target_specifier(const TaskDefinition& task, Rng& rng);

std::vector<Design> sample_query_pool(const TaskDefinition& task, int n, Rng& rng);

bool design_in_space(const TaskDefinition& task, const Design& x);
bool outcome_valid(const TaskDefinition& task, const Observation& y);

/// One simulated problem instance: ground truth, candidate pool and target.
struct Episode {
  Theta theta;
  std::vector<Design> pool;
  TargetSpecifier target;
  Vec target_values;  // raw-unit truth per target token
  std::optional<GpFunctionDraw> gp;

  Observation observe(const TaskDefinition& task, std::size_t pool_index, Rng& rng) const;
};

Episode sample_episode(const TaskDefinition& task, Rng& rng, int pool_size,
                       const std::optional<TargetSpecifier>& fixed_target = std::nullopt);

// --- Standardization --------------------------------------------------------

Vec encode_design(const TaskDefinition& task, const Design& x);
/// Outcome on the network scale (transform then affine).
double encode_outcome(const TaskDefinition& task, double y);
double encode_param(const TaskDefinition& task, int index, double value);
/// Affine map from the network scale back to raw units for target token
/// values (parameters, or transformed outcomes for predictive targets).
Affine target_affine(const TaskDefinition& task, const TargetSpecifier& target, std::size_t i);
/// Raw value -> the pre-affine target scale (applies the outcome transform).
double target_transform(const TaskDefinition& task, const TargetSpecifier& target, double raw);

}  // namespace aline
