#include "aline/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "aline/kernels.hpp"
#include "json.hpp"

namespace aline {

TrainConfig TrainConfig::for_task(const TaskDefinition& task) {
  TrainConfig c;
  c.horizon = task.horizon;
  c.pool_size = task.pool_size;
  c.target_count = task.target_count;
  return c;
}

void TrainConfig::validate() const {
  if (total_epochs < 0) throw InvalidArgument("train config: total_epochs must be >= 0");
  if (warmup_epochs < 0 || (total_epochs > 0 && warmup_epochs >= total_epochs))
    throw InvalidArgument("train config: warmup_epochs must be in [0, total_epochs)");
  if (batch_size < 1) throw InvalidArgument("train config: batch_size must be >= 1");
  if (horizon < 1) throw InvalidArgument("train config: horizon must be >= 1");
  if (pool_size < horizon) throw InvalidArgument("train config: pool_size must be >= horizon");
  if (target_count < 1) throw InvalidArgument("train config: target_count must be >= 1");
  if (!(discount > 0.0 && discount <= 1.0)) throw InvalidArgument("train config: discount must be in (0, 1]");
  if (!(lr > 0.0) || !(min_lr >= 0.0) || min_lr > lr) throw InvalidArgument("train config: bad learning rate");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("train config: weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw InvalidArgument("train config: clip_norm must be > 0");
}

ModelConfig model_config_for(const TaskDefinition& task, ModelConfig base) {
  base.param_dim = task.param_dim;
  base.design_dim = task.design_dim;
  base.outcome_dim = task.outcome_dim;
  base.binary_outcome = task.binary_outcome;
  return base;
}

template <class T>
EpisodeTensors<T> encode_episode(const TaskDefinition& task, const Episode& ep) {
  EpisodeTensors<T> et;
  et.pool_x.resize(static_cast<Eigen::Index>(ep.pool.size()), task.design_dim);
  for (std::size_t i = 0; i < ep.pool.size(); ++i) {
    const Vec e = encode_design(task, ep.pool[i]);
    for (int k = 0; k < task.design_dim; ++k) et.pool_x(i, k) = static_cast<T>(e[k]);
  }
  et.param_targets = ep.target.is_subset();
  if (et.param_targets) {
    et.target_params = ep.target.subset().indices;
    for (int l : et.target_params) et.target_values.push_back(static_cast<T>(encode_param(task, l, ep.theta.values[l])));
  } else {
    const auto& inputs = ep.target.predictive().inputs;
    et.target_x.resize(static_cast<Eigen::Index>(inputs.size()), task.design_dim);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const Vec e = encode_design(task, inputs[i]);
      for (int k = 0; k < task.design_dim; ++k) et.target_x(i, k) = static_cast<T>(e[k]);
    }
    for (double y : ep.target_values)
      et.target_values.push_back(static_cast<T>(task.binary_outcome ? y : encode_outcome(task, y)));
  }
  return et;
}

template <class T>
ModelInputs<T> make_inputs(const EpisodeTensors<T>& et, const Mat<T>& ctx_x, const Mat<T>& ctx_y,
                           std::span<const std::size_t> remaining) {
  ModelInputs<T> in;
  in.ctx_x = ctx_x;
  in.ctx_y = ctx_y;
  in.query_x.resize(static_cast<Eigen::Index>(remaining.size()), et.pool_x.cols());
  for (std::size_t j = 0; j < remaining.size(); ++j) in.query_x.row(j) = et.pool_x.row(remaining[j]);
  in.param_targets = et.param_targets;
  in.target_params = et.target_params;
  in.target_x = et.target_x;
  return in;
}

double compute_reward(std::span<const double> prev, std::span<const double> next) {
  if (prev.size() != next.size() || prev.empty()) throw InvalidArgument("compute_reward: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < prev.size(); ++i) s += next[i] - prev[i];
  return s / static_cast<double>(prev.size());
}

Vec compute_rewards(const EpisodeTrace& trace) {
  Vec r;
  const Vec* prev = &trace.log_q0;
  for (const auto& s : trace.steps) {
    r.push_back(compute_reward(*prev, s.log_q));
    prev = &s.log_q;
  }
  return r;
}

Vec policy_weights(std::span<const double> rewards, double discount, bool reward_to_go) {
  const std::size_t n = rewards.size();
  Vec w(n);
  double g = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    g *= discount;  // gamma^t with t starting at 1
    w[t] = g * rewards[t];
  }
  if (reward_to_go)
    for (std::size_t t = n; t-- > 1;) w[t - 1] += w[t];
  return w;
}

double pg_loss(const EpisodeTrace& trace, double discount, bool reward_to_go) {
  Vec r;
  for (const auto& s : trace.steps) r.push_back(s.reward);
  const Vec w = policy_weights(r, discount, reward_to_go);
  double loss = 0.0;
  for (std::size_t t = 0; t < w.size(); ++t) loss -= w[t] * trace.steps[t].log_pi;
  return loss;
}

double nll_loss(const EpisodeTrace& trace) {
  if (trace.steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& st : trace.steps)
    s += std::accumulate(st.log_q.begin(), st.log_q.end(), 0.0) / static_cast<double>(st.log_q.size());
  return -s / static_cast<double>(trace.steps.size());
}

template <class T>
EpisodeTrace run_episode(const ModelParams<T>& params, const TaskDefinition& task, const TrainConfig& cfg,
                         const Episode& episode, const RolloutOptions& opt, Rng& rng, std::span<T> grad,
                         double scale) {
  const int horizon = cfg.horizon;
  if (horizon < 1) throw InvalidArgument("run_episode: horizon must be >= 1");
  if (static_cast<int>(episode.pool.size()) < horizon)
    throw PoolExhausted("run_episode: pool of " + std::to_string(episode.pool.size()) + " cannot cover horizon " +
                        std::to_string(horizon));
  if (opt.fixed && (static_cast<int>(opt.fixed->pool_indices.size()) < horizon ||
                    static_cast<int>(opt.fixed->outcomes.size()) < horizon))
    throw InvalidArgument("run_episode: fixed actions shorter than horizon");
  const bool need_grad = !grad.empty();

  const EpisodeTensors<T> et = encode_episode<T>(task, episode);
  const int n_target = static_cast<int>(et.target_values.size());
  std::vector<std::size_t> remaining(episode.pool.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  Mat<T> ctx_x(0, task.design_dim), ctx_y(0, task.outcome_dim);

  std::vector<ModelInputs<T>> inputs;
  std::vector<ForwardCache<T>> caches;
  std::vector<ForwardOutput<T>> outputs;
  std::vector<int> choices;
  if (need_grad) {
    inputs.reserve(horizon + 1);
    caches.resize(horizon + 1);
    outputs.reserve(horizon + 1);
  }

  EpisodeTrace trace;
  trace.steps.resize(horizon);
  const std::vector<std::size_t> none;
  for (int t = 0; t <= horizon; ++t) {
    ModelInputs<T> in = make_inputs(et, ctx_x, ctx_y, t < horizon ? std::span<const std::size_t>(remaining)
                                                                  : std::span<const std::size_t>(none));
    ForwardOutput<T> out = forward(params, in, need_grad ? &caches[t] : nullptr);
    Vec lq(n_target);
    for (int i = 0; i < n_target; ++i) lq[i] = static_cast<double>(out.log_q(i, et.target_values[i]));
    if (t == 0) {
      trace.log_q0 = std::move(lq);
    } else {
      trace.steps[t - 1].log_q = std::move(lq);
    }

    if (t < horizon) {
      std::size_t j = 0;
      if (opt.fixed) {
        const auto it = std::find(remaining.begin(), remaining.end(), opt.fixed->pool_indices[t]);
        if (it == remaining.end()) throw InvalidArgument("run_episode: fixed action not in remaining pool");
        j = static_cast<std::size_t>(it - remaining.begin());
      } else if (opt.phase == Phase::Warmup) {
        j = std::uniform_int_distribution<std::size_t>(0, remaining.size() - 1)(rng);
      } else {
        j = select_action(out.policy(), opt.mode, rng);
      }
      const std::size_t idx = remaining[j];
      Observation y = opt.fixed ? opt.fixed->outcomes[t] : episode.observe(task, idx, rng);
      auto& st = trace.steps[t];
      st.pool_index = idx;
      st.log_pi = static_cast<double>(out.policy_log_probs[static_cast<Eigen::Index>(j)]);

      ctx_x.conservativeResize(t + 1, Eigen::NoChange);
      ctx_y.conservativeResize(t + 1, Eigen::NoChange);
      ctx_x.row(t) = et.pool_x.row(idx);
      ctx_y(t, 0) = static_cast<T>(encode_outcome(task, y.y[0]));
      trace.outcomes.push_back(std::move(y));
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(j));
      choices.push_back(static_cast<int>(j));
    }
    if (need_grad) {
      inputs.push_back(std::move(in));
      outputs.push_back(std::move(out));
    }
  }

  const Vec rewards = compute_rewards(trace);
  for (int t = 0; t < horizon; ++t) trace.steps[t].reward = rewards[t];

  if (need_grad) {
    const Vec w = policy_weights(opt.fixed_rewards ? *opt.fixed_rewards : rewards, cfg.discount, cfg.reward_to_go);
    const T nll_coef = static_cast<T>(-scale / (static_cast<double>(horizon) * n_target));
    for (int t = 0; t <= horizon; ++t) {
      OutputGrad<T> g;
      g.target_values = et.target_values;
      g.target_coef.assign(n_target, t > 0 ? nll_coef : T(0));
      if (t < horizon && opt.phase == Phase::Joint) {
        g.policy_choice = choices[t];
        g.policy_coef = static_cast<T>(-scale * w[t]);
      }
      backward(params, inputs[t], caches[t], outputs[t], g, grad);
    }
  }
  return trace;
}

template <class T>
EpisodeTrace run_episode(const ModelParams<T>& params, const TaskDefinition& task, const TrainConfig& cfg,
                         Phase phase, Rng& rng) {
  TaskDefinition t = task;
  t.target_count = cfg.target_count;
  const Episode ep = sample_episode(t, rng, cfg.pool_size);
  RolloutOptions opt;
  opt.phase = phase;
  return run_episode(params, t, cfg, ep, opt, rng);
}

// --- Optimizer --------------------------------------------------------------

template <class T>
void adamw_step(std::span<T> params, std::span<const T> grad, AdamWState& s, double lr, const AdamWOptions& o) {
  if (s.m.size() != params.size()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    double p = static_cast<double>(params[i]) * (1.0 - lr * o.weight_decay);
    s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * g;
    s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * g * g;
    p -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + o.eps);
    params[i] = static_cast<T>(p);
  }
}

double cosine_lr(double base, double floor, int epoch, int total_epochs) {
  if (total_epochs <= 0) return base;
  const double f = static_cast<double>(epoch) / total_epochs;
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

template <class T>
double clip_global_norm(std::span<T> grad, double max_norm) {
  double ss = 0.0;
  for (T g : grad) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (T& g : grad) g *= f;
  }
  return norm;
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["nll"] = m.nll;
  j["pg"] = m.pg;
  j["mean_reward"] = m.mean_reward;
  j["lr"] = m.lr;
  j["grad_norm"] = m.grad_norm;
  j["clipped"] = m.clipped;
  return j.dump();
}

// --- Training loop ----------------------------------------------------------

template <class T>
void train(ModelParams<T>& params, TrainState& state, const TaskDefinition& base_task, const TrainConfig& cfg,
           const TrainHooks& hooks) {
  cfg.validate();
  TaskDefinition task = base_task;
  task.target_count = cfg.target_count;
  AdamWOptions aopt;
  aopt.weight_decay = cfg.weight_decay;

  AlignedVec<T> grad(params.data.size());
  std::vector<EpisodeTrace> traces(cfg.batch_size);
  for (int epoch = state.epoch + 1; epoch <= cfg.total_epochs; ++epoch) {
    const Phase phase = epoch <= cfg.warmup_epochs ? Phase::Warmup : Phase::Joint;
    const double lr = cosine_lr(cfg.lr, cfg.min_lr, epoch - 1, cfg.total_epochs);
    std::fill(grad.begin(), grad.end(), T(0));

    const kernels::EpisodeGradFn<T> fn = [&](int b, std::span<T> g) {
      Rng rng = make_stream(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)});
      const Episode ep = sample_episode(task, rng, cfg.pool_size);
      RolloutOptions opt;
      opt.phase = phase;
      traces[b] = run_episode(params, task, cfg, ep, opt, rng, g, 1.0 / cfg.batch_size);
    };
    try {
      if (hooks.parallel) {
        kernels::batch_gradient_parallel<T>(cfg.batch_size, fn, grad);
      } else {
        kernels::batch_gradient_serial<T>(cfg.batch_size, fn, grad);
      }
    } catch (const NumericalError& e) {
      throw TrainingDiverged(std::string("epoch ") + std::to_string(epoch) + ": " + e.what(), epoch);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    for (const auto& tr : traces) {
      m.nll += nll_loss(tr);
      if (phase == Phase::Joint) m.pg += pg_loss(tr, cfg.discount, cfg.reward_to_go);
      double r = 0.0;
      for (const auto& s : tr.steps) r += s.reward;
      m.mean_reward += r / static_cast<double>(tr.steps.size());
    }
    m.nll /= cfg.batch_size;
    m.pg /= cfg.batch_size;
    m.mean_reward /= cfg.batch_size;
    m.grad_norm = clip_global_norm<T>(grad, cfg.clip_norm);
    m.clipped = m.grad_norm > cfg.clip_norm;
    if (!std::isfinite(m.nll) || !std::isfinite(m.pg) || !std::isfinite(m.grad_norm))
      throw TrainingDiverged("epoch " + std::to_string(epoch) + ": non-finite loss", epoch);

    adamw_step<T>(params.data, grad, state.adam, lr, aopt);
    state.epoch = epoch;
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && epoch % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(epoch);
  }
}

template <class T>
TrainResult<T> train(const TaskDefinition& task, const ModelConfig& model, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  Rng init = make_stream(cfg.seed, {0xA11CEULL});
  TrainResult<T> r{init_params<T>(model_config_for(task, model), init), {}, {}};
  TrainHooks h = hooks;
  h.on_epoch = [&](const EpochMetrics& m) {
    r.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
  };
  train(r.params, r.state, task, cfg, h);
  return r;
}

#define ALINE_TRAIN_INSTANTIATE(T)                                                                          \
  template EpisodeTensors<T> encode_episode<T>(const TaskDefinition&, const Episode&);                     \
  template ModelInputs<T> make_inputs<T>(const EpisodeTensors<T>&, const Mat<T>&, const Mat<T>&,           \
                                         std::span<const std::size_t>);                                    \
  template EpisodeTrace run_episode<T>(const ModelParams<T>&, const TaskDefinition&, const TrainConfig&,   \
                                       const Episode&, const RolloutOptions&, Rng&, std::span<T>, double); \
  template EpisodeTrace run_episode<T>(const ModelParams<T>&, const TaskDefinition&, const TrainConfig&,   \
                                       Phase, Rng&);                                                       \
  template void adamw_step<T>(std::span<T>, std::span<const T>, AdamWState&, double, const AdamWOptions&); \
  template double clip_global_norm<T>(std::span<T>, double);                                               \
  template void train<T>(ModelParams<T>&, TrainState&, const TaskDefinition&, const TrainConfig&,          \
                         const TrainHooks&);                                                               \
  template TrainResult<T> train<T>(const TaskDefinition&, const ModelConfig&, const TrainConfig&,          \
                                   const TrainHooks&);

ALINE_TRAIN_INSTANTIATE(float)
ALINE_TRAIN_INSTANTIATE(double)

}  // namespace aline
