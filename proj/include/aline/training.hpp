#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aline/model.hpp"
#include "aline/tasks.hpp"

namespace aline {

struct TrainConfig {
  int total_epochs = 1000;
  int warmup_epochs = 100;
  int batch_size = 200;
  int horizon = 30;
  int pool_size = 500;
  int target_count = 100;
  double discount = 1.0;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double min_lr = 0.0;  // cosine annealing floor
  double clip_norm = 10.0;
  bool reward_to_go = false;
  std::uint64_t seed = 0;

  /// Horizon, pool size and target count taken from the task.
  static TrainConfig for_task(const TaskDefinition& task);
  void validate() const;
};

enum class Phase { Warmup, Joint };

class PoolExhausted : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct TraceStep {
  std::size_t pool_index = 0;  // index into the episode's original pool
  double log_pi = 0.0;         // log pi(x_t | D_{t-1})
  Vec log_q;                   // per-target log q after step t (network scale)
  double reward = 0.0;
};

struct EpisodeTrace {
  Vec log_q0;  // per-target log q with empty history
  std::vector<TraceStep> steps;
  std::vector<Observation> outcomes;
  std::size_t horizon() const { return steps.size(); }
};

/// Pool indices to query in order, with the outcomes to use for them. Used
/// to replay a trajectory with fixed actions.
struct FixedActions {
  std::vector<std::size_t> pool_indices;
  std::vector<Observation> outcomes;
};

/// Options for one rollout beyond the training config.
struct RolloutOptions {
  Phase phase = Phase::Joint;
  SelectMode mode = SelectMode::Sample;
  const FixedActions* fixed = nullptr;
  /// Overrides the self-estimated rewards in the policy loss (treated as constants).
  const Vec* fixed_rewards = nullptr;
};

/// Network-scale inputs for one episode.
template <class T>
struct EpisodeTensors {
  Mat<T> pool_x;
  bool param_targets = true;
  std::vector<int> target_params;
  Mat<T> target_x;
  std::vector<T> target_values;  // network scale (raw 0/1 for Bernoulli targets)
};

template <class T>
EpisodeTensors<T> encode_episode(const TaskDefinition& task, const Episode& ep);

/// Inputs for the given history (encoded rows) and remaining pool positions.
template <class T>
ModelInputs<T> make_inputs(const EpisodeTensors<T>& et, const Mat<T>& ctx_x, const Mat<T>& ctx_y,
                           std::span<const std::size_t> remaining);

/// Rolls out one episode of `cfg.horizon` steps. When `grad` is non-empty the
/// gradient of scale * (nll_loss + pg_loss) is accumulated into it (the policy
/// term only in the joint phase).
template <class T>
EpisodeTrace run_episode(const ModelParams<T>& params, const TaskDefinition& task, const TrainConfig& cfg,
                         const Episode& episode, const RolloutOptions& opt, Rng& rng, std::span<T> grad = {},
                         double scale = 1.0);

/// Samples an episode with the config's pool size then rolls it out.
template <class T>
EpisodeTrace run_episode(const ModelParams<T>& params, const TaskDefinition& task, const TrainConfig& cfg,
                         Phase phase, Rng& rng);

/// R_t = mean_i (log q_t,i - log q_{t-1},i).
double compute_reward(std::span<const double> log_q_prev, std::span<const double> log_q_next);
Vec compute_rewards(const EpisodeTrace& trace);

/// Per-step weights on log pi: gamma^t R_t, or discounted returns from t.
Vec policy_weights(std::span<const double> rewards, double discount, bool reward_to_go);
double pg_loss(const EpisodeTrace& trace, double discount, bool reward_to_go = false);
double nll_loss(const EpisodeTrace& trace);

// --- Optimizer --------------------------------------------------------------

struct AdamWState {
  std::vector<double> m, v;
  long step = 0;
};

struct AdamWOptions {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
};

template <class T>
void adamw_step(std::span<T> params, std::span<const T> grad, AdamWState& state, double lr,
                const AdamWOptions& opt);

double cosine_lr(double base, double floor, int epoch, int total_epochs);

/// Scales `grad` in place to the given global norm; returns the norm before clipping.
template <class T>
double clip_global_norm(std::span<T> grad, double max_norm);

// --- Training loop ----------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double nll = 0.0;
  double pg = 0.0;
  double mean_reward = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

std::string metrics_json(const EpochMetrics& m);

struct TrainState {
  int epoch = 0;  // epochs completed
  AdamWState adam;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int epoch) : std::runtime_error(what), epoch(epoch) {}
  int epoch;
};

template <class T>
struct TrainResult {
  ModelParams<T> params;
  TrainState state;
  std::vector<EpochMetrics> metrics;
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called with (epochs completed) every `checkpoint_every` epochs.
  std::function<void(int)> on_checkpoint;
  int checkpoint_every = 0;
  bool parallel = true;
};

/// Runs epochs state.epoch+1 .. cfg.total_epochs; warm-up epochs apply only
/// the NLL loss with uniformly random actions. On a non-finite loss throws
/// TrainingDiverged, leaving `params` at the last finite state.
template <class T>
void train(ModelParams<T>& params, TrainState& state, const TaskDefinition& task, const TrainConfig& cfg,
           const TrainHooks& hooks = {});

template <class T>
TrainResult<T> train(const TaskDefinition& task, const ModelConfig& model, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

/// Model config matching a task's dimensions.
ModelConfig model_config_for(const TaskDefinition& task, ModelConfig base = {});

}  // namespace aline
