#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>

#include "aline/gradcheck.hpp"
#include "aline/math.hpp"
#include "aline/training.hpp"

using namespace aline;

namespace {

ModelConfig small_model(const TaskDefinition& task) {
  ModelConfig c;
  c.emb_dim = 16;
  c.ff_dim = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_mixture = 3;
  return model_config_for(task, c);
}

TrainConfig small_train(const TaskDefinition& task, int horizon = 4, int pool = 12) {
  TrainConfig c = TrainConfig::for_task(task);
  c.horizon = horizon;
  c.pool_size = pool;
  c.target_count = std::min(task.target_count, 8);
  c.batch_size = 4;
  c.total_epochs = 3;
  c.warmup_epochs = 1;
  return c;
}

EpisodeTrace trace_with(const Vec& rewards, const Vec& log_pi) {
  EpisodeTrace tr;
  for (std::size_t t = 0; t < rewards.size(); ++t) {
    TraceStep s;
    s.reward = rewards[t];
    s.log_pi = log_pi[t];
    tr.steps.push_back(s);
  }
  return tr;
}

}  // namespace

TEST(Reward, MeanOfImprovements) {
  EXPECT_DOUBLE_EQ(compute_reward(Vec{-1.0, -2.0}, Vec{-0.6, -1.4}), 0.5);
  EXPECT_DOUBLE_EQ(compute_reward(Vec{-1.0, 3.0}, Vec{-1.0, 3.0}), 0.0);
  EXPECT_THROW(compute_reward(Vec{1.0}, Vec{1.0, 2.0}), InvalidArgument);
}

TEST(Reward, TelescopesOnEveryTask) {
  for (const auto& name : task_names()) {
    const TaskDefinition task = make_task(name);
    const TrainConfig cfg = small_train(task, 5, 10);
    Rng init = make_stream(1);
    const auto params = init_params<float>(small_model(task), init);
    for (int e = 0; e < 10; ++e) {
      Rng rng = make_stream(7, {static_cast<std::uint64_t>(e)});
      const EpisodeTrace tr = run_episode(params, task, cfg, e % 2 ? Phase::Joint : Phase::Warmup, rng);
      ASSERT_EQ(tr.horizon(), 5u);
      double sum = 0.0;
      for (const auto& s : tr.steps) sum += s.reward;
      const Vec& last = tr.steps.back().log_q;
      const double direct = (std::accumulate(last.begin(), last.end(), 0.0) -
                             std::accumulate(tr.log_q0.begin(), tr.log_q0.end(), 0.0)) /
                            static_cast<double>(last.size());
      EXPECT_NEAR(sum, direct, 1e-5) << name;
    }
  }
}

TEST(Reward, PredictiveRewardMatchesRecomputation) {
  TaskDefinition task = make_task("gp1d");
  task.target_count = 100;
  TrainConfig cfg = small_train(task, 3, 10);
  cfg.target_count = 100;
  Rng init = make_stream(2);
  const auto params = init_params<double>(small_model(task), init);
  Rng rng = make_stream(3);
  const Episode ep = sample_episode(task, rng, cfg.pool_size);
  const EpisodeTrace tr = run_episode(params, task, cfg, ep, RolloutOptions{}, rng);

  // Rebuild the context after each step and evaluate the mixtures directly.
  const auto et = encode_episode<double>(task, ep);
  Vec prev(100);
  std::vector<std::size_t> remaining(ep.pool.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  Mat<double> cx(0, 1), cy(0, 1);
  for (int t = 0; t <= 3; ++t) {
    const auto out = forward(params, make_inputs(et, cx, cy, remaining));
    Vec lq(100);
    for (int i = 0; i < 100; ++i) lq[i] = gmm_log_prob(out.gmm(i), et.target_values[i]);
    if (t > 0) {
      double mean = 0.0;
      for (int i = 0; i < 100; ++i) mean += (lq[i] - prev[i]) / 100.0;
      EXPECT_NEAR(tr.steps[t - 1].reward, mean, 1e-9);
    }
    prev = lq;
    if (t == 3) break;
    const std::size_t idx = tr.steps[t].pool_index;
    cx.conservativeResize(t + 1, Eigen::NoChange);
    cy.conservativeResize(t + 1, Eigen::NoChange);
    cx.row(t) = et.pool_x.row(idx);
    cy(t, 0) = encode_outcome(task, tr.outcomes[t].y[0]);
    remaining.erase(std::find(remaining.begin(), remaining.end(), idx));
  }
  double nll = 0.0;
  for (const auto& s : tr.steps) nll -= std::accumulate(s.log_q.begin(), s.log_q.end(), 0.0) / 100.0 / 3.0;
  EXPECT_NEAR(nll_loss(tr), nll, 1e-12);
}

TEST(PolicyLoss, SingleTerm) {
  EXPECT_DOUBLE_EQ(pg_loss(trace_with({2.0}, {-0.5}), 1.0), 1.0);
  EXPECT_DOUBLE_EQ(pg_loss(trace_with({0.0, 0.0}, {-0.5, -3.0}), 1.0), 0.0);
}

TEST(PolicyLoss, DiscountStartsAtStepOne) {
  const Vec w = policy_weights(Vec{1.0, 1.0}, 0.5, false);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 0.25);
  EXPECT_DOUBLE_EQ(pg_loss(trace_with({1.0, 2.0}, {-1.0, -2.0}), 0.5), 0.5 * 1.0 + 0.25 * 2.0 * 2.0);
}

TEST(PolicyLoss, RewardToGoFlag) {
  const Vec w = policy_weights(Vec{1.0, 2.0, 3.0}, 0.5, true);
  EXPECT_DOUBLE_EQ(w[2], 0.125 * 3.0);
  EXPECT_DOUBLE_EQ(w[1], 0.25 * 2.0 + 0.125 * 3.0);
  EXPECT_DOUBLE_EQ(w[0], 0.5 + 0.25 * 2.0 + 0.125 * 3.0);
}

TEST(PolicyLoss, ConstantRewardShift) {
  const Vec lp = {-0.3, -1.2, -0.7};
  const double c = 0.8, g = 0.9;
  const double a = pg_loss(trace_with({0.1, 0.2, 0.3}, lp), g);
  const double b = pg_loss(trace_with({0.1 + c, 0.2 + c, 0.3 + c}, lp), g);
  EXPECT_NEAR(b - a, -c * (g * lp[0] + g * g * lp[1] + g * g * g * lp[2]), 1e-12);
}

TEST(NllLoss, MeanOverStepsAndTargets) {
  EpisodeTrace tr;
  tr.steps.push_back(TraceStep{0, 0.0, {-2.3}, 0.0});
  EXPECT_DOUBLE_EQ(nll_loss(tr), 2.3);
  EpisodeTrace two = tr;
  two.steps.push_back(tr.steps[0]);
  EXPECT_DOUBLE_EQ(nll_loss(two), 2.3);
  EpisodeTrace multi;
  multi.steps.push_back(TraceStep{0, 0.0, {-1.0, -3.0}, 0.0});
  EXPECT_DOUBLE_EQ(nll_loss(multi), 2.0);
}

TEST(Rollout, SingleCandidateIsChosen) {
  const TaskDefinition task = make_task("location_finding");
  TrainConfig cfg = small_train(task, 1, 1);
  Rng init = make_stream(4);
  const auto params = init_params<float>(small_model(task), init);
  Rng rng = make_stream(5);
  const EpisodeTrace tr = run_episode(params, task, cfg, Phase::Warmup, rng);
  ASSERT_EQ(tr.horizon(), 1u);
  EXPECT_EQ(tr.steps[0].pool_index, 0u);
  EXPECT_NEAR(tr.steps[0].log_pi, 0.0, 1e-6);
}

TEST(Rollout, PoolMustCoverHorizon) {
  const TaskDefinition task = make_task("ces");
  TrainConfig cfg = small_train(task, 5, 5);
  Rng init = make_stream(4);
  const auto params = init_params<float>(small_model(task), init);
  Rng rng = make_stream(5);
  const Episode ep = sample_episode(task, rng, 4);
  EXPECT_THROW(run_episode(params, task, cfg, ep, RolloutOptions{}, rng), PoolExhausted);
}

TEST(Rollout, QueriesWithoutReplacement) {
  const TaskDefinition task = make_task("psychometric");
  const TrainConfig cfg = small_train(task, 8, 8);
  Rng init = make_stream(6);
  const auto params = init_params<float>(small_model(task), init);
  Rng rng = make_stream(7);
  const EpisodeTrace tr = run_episode(params, task, cfg, Phase::Joint, rng);
  std::vector<std::size_t> idx;
  for (const auto& s : tr.steps) idx.push_back(s.pool_index);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
  for (const auto& s : tr.steps) {
    EXPECT_LE(s.log_pi, 1e-6);
    for (double v : s.log_q) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Rollout, SameSeedSameTrace) {
  const TaskDefinition task = make_task("gp1d");
  const TrainConfig cfg = small_train(task);
  Rng init = make_stream(8);
  const auto params = init_params<float>(small_model(task), init);
  Rng a = make_stream(9), b = make_stream(9);
  const EpisodeTrace ta = run_episode(params, task, cfg, Phase::Joint, a);
  const EpisodeTrace tb = run_episode(params, task, cfg, Phase::Joint, b);
  EXPECT_EQ(ta.log_q0, tb.log_q0);
  ASSERT_EQ(ta.steps.size(), tb.steps.size());
  for (std::size_t t = 0; t < ta.steps.size(); ++t) {
    EXPECT_EQ(ta.steps[t].pool_index, tb.steps[t].pool_index);
    EXPECT_EQ(ta.steps[t].log_pi, tb.steps[t].log_pi);
    EXPECT_EQ(ta.steps[t].log_q, tb.steps[t].log_q);
  }
}

TEST(Rollout, WarmupActionsAreUniform) {
  const TaskDefinition task = make_task("location_finding");
  const TrainConfig cfg = small_train(task, 2, 10);
  Rng init = make_stream(10);
  auto params = init_params<float>(small_model(task), init);
  // Bias the policy head hard so a leak of policy sampling into warm-up would show.
  auto b2 = params.tensor("head.policy.w2");
  for (auto& v : b2) v *= 50.0f;
  std::vector<int> counts(10, 0);
  int n = 0;
  for (int e = 0; e < 5000; ++e) {
    Rng rng = make_stream(11, {static_cast<std::uint64_t>(e)});
    const EpisodeTrace tr = run_episode(params, task, cfg, Phase::Warmup, rng);
    for (const auto& s : tr.steps) {
      ++counts[s.pool_index];
      ++n;
    }
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
  EXPECT_LT(chi2, 27.88);  // chi-squared, 9 dof, p = 0.001
}

TEST(Rollout, RewardsDoNotEnterNllGradient) {
  const TaskDefinition task = make_task("location_finding");
  TrainConfig cfg = small_train(task, 2, 3);
  Rng init = make_stream(12);
  const auto params = init_params<double>(tiny_model_config(task), init);
  Rng rng = make_stream(13);
  const Episode ep = sample_episode(task, rng, 3);
  const EpisodeTrace first = run_episode(params, task, cfg, ep, RolloutOptions{}, rng);
  FixedActions fx{{first.steps[0].pool_index, first.steps[1].pool_index}, first.outcomes};

  auto grad_for = [&](const Vec* rewards, Phase phase) {
    std::vector<double> g(params.data.size(), 0.0);
    RolloutOptions opt;
    opt.phase = phase;
    opt.fixed = &fx;
    opt.fixed_rewards = rewards;
    Rng r = make_stream(0);
    run_episode<double>(params, task, cfg, ep, opt, r, g, 1.0);
    return g;
  };
  const Vec zero{0.0, 0.0}, r{0.3, -0.1}, shifted{1.3, 0.9}, c{1.0, 1.0};
  const auto g0 = grad_for(&zero, Phase::Joint);
  const auto gw = grad_for(nullptr, Phase::Warmup);
  const auto gr = grad_for(&r, Phase::Joint);
  const auto gs = grad_for(&shifted, Phase::Joint);
  const auto gc = grad_for(&c, Phase::Joint);
  for (std::size_t k = 0; k < g0.size(); ++k) {
    EXPECT_NEAR(g0[k], gw[k], 1e-12);  // zero rewards leave only the NLL term
    EXPECT_NEAR(gs[k] - gr[k], gc[k] - g0[k], 1e-10);
  }
}

TEST(GradCheck, CombinedLossTinyConfig) {
  for (const char* name : {"location_finding", "gp1d", "psychometric"}) {
    const TaskDefinition task = make_task(name);
    const auto errs = combined_loss_gradcheck(task, tiny_model_config(task), 2, 3, 4, 17);
    for (const auto& e : errs) EXPECT_LE(e.rel_error, 1e-3) << name << " " << e.name;
  }
}

TEST(GradCheck, BinaryPredictiveTargets) {
  TaskDefinition task = make_task("psychometric");
  task.target_config = {TargetOption{{}, 1.0}};
  const auto errs = combined_loss_gradcheck(task, tiny_model_config(task), 2, 3, 3, 19);
  for (const auto& e : errs) EXPECT_LE(e.rel_error, 1e-3) << e.name;
}

TEST(Optimizer, AdamWConvergesOnQuadratic) {
  std::vector<double> x = {3.0, -2.0, 0.5};
  const std::vector<double> target = {1.0, 4.0, -1.0};
  AdamWState st;
  AdamWOptions o;
  o.weight_decay = 0.0;
  for (int i = 0; i < 5000; ++i) {
    std::vector<double> g(3);
    for (int k = 0; k < 3; ++k) g[k] = 2.0 * (x[k] - target[k]) * (k + 1);
    adamw_step<double>(x, g, st, cosine_lr(0.05, 0.0, i, 5000), o);
  }
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(x[k], target[k], 1e-3);
}

TEST(Optimizer, DecoupledWeightDecay) {
  std::vector<double> x = {2.0};
  AdamWState st;
  adamw_step<double>(x, std::vector<double>{0.0}, st, 0.1, AdamWOptions{});
  EXPECT_DOUBLE_EQ(x[0], 2.0 * (1.0 - 0.1 * 0.01));
}

TEST(Optimizer, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 0.0, 0, 100), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 0.0, 50, 100), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(1e-3, 1e-5, 100, 100), 1e-5, 1e-18);
}

TEST(Optimizer, GlobalNormClipping) {
  std::vector<float> g = {3.0f, 4.0f};
  EXPECT_DOUBLE_EQ(clip_global_norm<float>(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6f, 1e-7);
  EXPECT_NEAR(g[1], 0.8f, 1e-7);
  std::vector<float> small = {0.1f};
  clip_global_norm<float>(small, 1.0);
  EXPECT_EQ(small[0], 0.1f);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.warmup_epochs = c.total_epochs;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.discount = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.pool_size = c.horizon - 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const TaskDefinition task = make_task("ces");
  TrainConfig cfg = small_train(task);
  cfg.total_epochs = 0;
  cfg.warmup_epochs = 0;
  cfg.seed = 5;
  const auto r = train<float>(task, small_model(task), cfg);
  Rng init = make_stream(5, {0xA11CEULL});
  const auto p0 = init_params<float>(model_config_for(task, small_model(task)), init);
  EXPECT_EQ(r.params.data, p0.data);
  EXPECT_TRUE(r.metrics.empty());
}

TEST(Train, SerialAndParallelAreBitIdentical) {
  setenv("ALINE_NUM_THREADS", "4", 1);
  const TaskDefinition task = make_task("location_finding");
  TrainConfig cfg = small_train(task);
  cfg.seed = 21;
  TrainHooks serial;
  serial.parallel = false;
  TrainHooks parallel;
  parallel.parallel = true;
  const auto a = train<float>(task, small_model(task), cfg, serial);
  const auto b = train<float>(task, small_model(task), cfg, parallel);
  unsetenv("ALINE_NUM_THREADS");
  EXPECT_EQ(a.params.data, b.params.data);
  ASSERT_EQ(a.metrics.size(), 3u);
  for (std::size_t i = 0; i < a.metrics.size(); ++i)
    EXPECT_EQ(metrics_json(a.metrics[i]), metrics_json(b.metrics[i]));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const TaskDefinition task = make_task("gp1d");
  TrainConfig cfg = small_train(task);
  cfg.total_epochs = 4;
  cfg.seed = 2;
  const auto full = train<float>(task, small_model(task), cfg);

  TrainConfig half = cfg;
  Rng init = make_stream(cfg.seed, {0xA11CEULL});
  auto params = init_params<float>(model_config_for(task, small_model(task)), init);
  TrainState st;
  std::vector<EpochMetrics> log;
  TrainHooks h;
  h.on_epoch = [&](const EpochMetrics& m) { log.push_back(m); };
  h.on_checkpoint = [&](int e) {
    if (e == 2) throw std::runtime_error("stop");
  };
  h.checkpoint_every = 2;
  EXPECT_THROW(train(params, st, task, half, h), std::runtime_error);
  EXPECT_EQ(st.epoch, 2);
  h.on_checkpoint = nullptr;
  train(params, st, task, half, h);
  EXPECT_EQ(params.data, full.params.data);
  ASSERT_EQ(log.size(), full.metrics.size());
  for (std::size_t i = 0; i < log.size(); ++i) EXPECT_EQ(metrics_json(log[i]), metrics_json(full.metrics[i]));
}

TEST(Train, WarmupReducesNll) {
  const TaskDefinition task = make_task("gp1d");
  TrainConfig cfg = small_train(task, 5, 20);
  cfg.batch_size = 8;
  cfg.total_epochs = 81;
  cfg.warmup_epochs = 80;
  cfg.lr = 3e-3;
  cfg.seed = 1;
  TrainHooks h;
  std::vector<double> nll;
  h.on_epoch = [&](const EpochMetrics& m) {
    if (m.epoch <= cfg.warmup_epochs) nll.push_back(m.nll);
  };
  train<float>(task, small_model(task), cfg, h);
  ASSERT_EQ(nll.size(), 80u);
  const double first = std::accumulate(nll.begin(), nll.begin() + 8, 0.0) / 8.0;
  const double last = std::accumulate(nll.end() - 8, nll.end(), 0.0) / 8.0;
  EXPECT_LT(last, first);
}

TEST(Train, MetricsRecordFields) {
  EpochMetrics m{3, 1.5, -0.25, 0.1, 1e-3, 12.0, true};
  EXPECT_EQ(metrics_json(m),
            R"({"epoch":3,"nll":1.5,"pg":-0.25,"mean_reward":0.1,"lr":0.001,"grad_norm":12.0,"clipped":true})");
}
