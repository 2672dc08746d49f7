#include "aline/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "aline/training.hpp"

namespace aline {

ModelConfig tiny_model_config(const TaskDefinition& task) {
  ModelConfig c;
  c.emb_dim = 8;
  c.ff_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_mixture = 3;
  return model_config_for(task, c);
}

std::vector<TensorGradError> combined_loss_gradcheck(const TaskDefinition& base, const ModelConfig& model,
                                                     int horizon, int pool_size, int target_count,
                                                     std::uint64_t seed, double step, double floor) {
  TaskDefinition task = base;
  task.target_count = target_count;
  TrainConfig cfg = TrainConfig::for_task(task);
  cfg.horizon = horizon;
  cfg.pool_size = pool_size;
  cfg.target_count = target_count;
  cfg.discount = 0.9;

  Rng init = make_stream(seed, {1});
  ModelParams<double> params = init_params<double>(model_config_for(task, model), init);
  Rng rng = make_stream(seed, {2});
  const Episode ep = sample_episode(task, rng, pool_size);

  RolloutOptions sample;
  const EpisodeTrace first = run_episode(params, task, cfg, ep, sample, rng);
  FixedActions fixed;
  for (std::size_t t = 0; t < first.steps.size(); ++t) fixed.pool_indices.push_back(first.steps[t].pool_index);
  fixed.outcomes = first.outcomes;
  const Vec rewards = compute_rewards(first);
  RolloutOptions opt;
  opt.fixed = &fixed;
  opt.fixed_rewards = &rewards;

  const Vec w = policy_weights(rewards, cfg.discount, cfg.reward_to_go);
  auto loss = [&](const ModelParams<double>& p) {
    Rng unused = make_stream(0);
    const EpisodeTrace tr = run_episode(p, task, cfg, ep, opt, unused);
    double l = nll_loss(tr);
    for (std::size_t t = 0; t < w.size(); ++t) l -= w[t] * tr.steps[t].log_pi;
    return l;
  };

  AlignedVec<double> grad(params.data.size(), 0.0);
  Rng unused = make_stream(0);
  run_episode<double>(params, task, cfg, ep, opt, unused, grad, 1.0);

  std::vector<TensorGradError> out;
  for (const auto& ti : params.layout->tensors()) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t k = ti.offset; k < ti.offset + ti.size; ++k) {
      const double orig = params.data[k];
      params.data[k] = orig + step;
      const double up = loss(params);
      params.data[k] = orig - step;
      const double down = loss(params);
      params.data[k] = orig;
      const double num = (up - down) / (2.0 * step);
      diff2 += (grad[k] - num) * (grad[k] - num);
      a2 += grad[k] * grad[k];
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    out.push_back({ti.name, std::sqrt(diff2) / denom, std::sqrt(a2), std::sqrt(n2)});
  }
  return out;
}

}  // namespace aline
