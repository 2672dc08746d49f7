#include "aline/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "aline/math.hpp"
#include "model_fixtures.hpp"

namespace aline {
namespace {

using testing::random_inputs;
using testing::random_mat;
using testing::small_config;

TEST(MaskTest, QueryOnlySeesTargetAndSelf) {
  const auto m = build_mask(0, 1, 1);
  EXPECT_TRUE(m(0, 0));
  EXPECT_TRUE(m(0, 1));
  EXPECT_FALSE(m(1, 0));
  EXPECT_TRUE(m(1, 1));
}

TEST(MaskTest, TargetsSeeContextAndSelf) {
  const auto m = build_mask(3, 0, 2);
  for (int r = 3; r < 5; ++r)
    for (int c = 0; c < 5; ++c) EXPECT_EQ(m(r, c), c < 3 || c == r) << r << "," << c;
}

TEST(MaskTest, QueriesSeeContextWithoutTargets) {
  const auto m = build_mask(2, 2, 0);
  EXPECT_TRUE(m(2, 0));
  EXPECT_TRUE(m(2, 1));
  EXPECT_TRUE(m(2, 2));
  EXPECT_FALSE(m(2, 3));
  EXPECT_FALSE(m(0, 2));
}

TEST(MaskTest, InvariantsAndGroupsAgree) {
  for (int nc : {0, 1, 4})
    for (int nq : {0, 1, 3})
      for (int nt : {0, 1, 2}) {
        const auto m = build_mask(nc, nq, nt);
        const int n = m.size();
        std::vector<char> from_groups(static_cast<std::size_t>(n) * n, 0);
        for (const auto& g : attention_groups(nc, nq, nt))
          for (int r = g.row_begin; r < g.row_end; ++r) {
            for (const auto& [b, e] : g.col_ranges)
              for (int c = b; c < e; ++c) from_groups[static_cast<std::size_t>(r) * n + c] = 1;
            if (g.self) from_groups[static_cast<std::size_t>(r) * n + r] = 1;
          }
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < n; ++c) {
            const bool query_col = c >= nc && c < nc + nq;
            if (query_col && c != r) EXPECT_FALSE(m(r, c));
            if (r < nc) EXPECT_EQ(m(r, c), c < nc);
            EXPECT_EQ(m(r, c), from_groups[static_cast<std::size_t>(r) * n + c] != 0) << r << "," << c;
          }
      }
  EXPECT_THROW(build_mask(-1, 0, 0), InvalidArgument);
}

TEST(GmmTest, StandardNormalAtMode) {
  const GmmParams g{{1.0}, {0.0}, {1.0}};
  EXPECT_NEAR(gmm_log_prob(g, 0.0), -0.9189385, 1e-7);
  const GmmParams two{{0.5, 0.5}, {0.0, 0.0}, {1.0, 1.0}};
  EXPECT_NEAR(gmm_log_prob(two, 0.0), gmm_log_prob(g, 0.0), 1e-14);
}

TEST(GmmTest, QuadratureNormalizes) {
  const GmmParams g{{0.2, 0.5, 0.3}, {-3.0, 0.5, 4.0}, {0.3, 1.2, 2.0}};
  const int n = 40000;
  const double lo = -30, hi = 30, h = (hi - lo) / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) s += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(gmm_log_prob(g, lo + i * h));
  EXPECT_NEAR(s * h, 1.0, 1e-3);
  EXPECT_NEAR(g.mean(), 0.2 * -3.0 + 0.5 * 0.5 + 0.3 * 4.0, 1e-12);
}

TEST(SelectTest, OneHotAndTies) {
  Rng rng = make_stream(1);
  const PolicyDistribution one{{0.0, 0.0, 1.0, 0.0}};
  EXPECT_EQ(select_action(one, SelectMode::Argmax, rng), 2u);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(select_action(one, SelectMode::Sample, rng), 2u);
  const PolicyDistribution tie{{0.1, 0.1, 0.3, 0.0, 0.2, 0.3}};
  EXPECT_EQ(select_action(tie, SelectMode::Argmax, rng), 2u);
}

TEST(SelectTest, UniformSampling) {
  Rng rng = make_stream(2);
  const PolicyDistribution u{{0.25, 0.25, 0.25, 0.25}};
  const int n = 10000;
  int counts[4] = {};
  for (int i = 0; i < n; ++i) ++counts[select_action(u, SelectMode::Sample, rng)];
  const double sd = std::sqrt(n * 0.25 * 0.75);
  for (int c : counts) EXPECT_LT(std::abs(c - n * 0.25), 3 * sd);
}

TEST(ModelTest, LayoutNamesAndShapes) {
  const auto cfg = small_config();
  const ParamLayout layout(cfg);
  EXPECT_EQ(layout.find("embed.theta").shape, (std::vector<int>{2, 16}));
  EXPECT_EQ(layout.find("head.gmm.w2").shape, (std::vector<int>{3, 3, 16}));
  EXPECT_EQ(layout.find("head.policy.w1").shape, (std::vector<int>{32, 16}));
  EXPECT_EQ(layout.find("layers.1.attn.wq").shape, (std::vector<int>{16, 16}));
  EXPECT_THROW(layout.find("missing"), InvalidArgument);
  std::size_t total = 0;
  for (const auto& t : layout.tensors()) {
    EXPECT_EQ(t.offset, total);
    total += t.size;
  }
  EXPECT_EQ(total, layout.size());
}

TEST(ModelTest, ConfigValidation) {
  ModelConfig c;
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig{};
  c.n_mixture = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ModelTest, EmbeddingCountsAndSharing) {
  const auto cfg = small_config();
  Rng rng = make_stream(3);
  const auto P = init_params<double>(cfg, rng);
  ModelInputs<double> in;
  in.ctx_x.resize(0, 1);
  in.ctx_y.resize(0, 1);
  in.query_x = random_mat<double>(1, 1, rng);
  in.target_params = {0};
  EXPECT_EQ(embed_tokens(P, in).rows(), 2);

  in.ctx_x = Mat<double>::Constant(2, 1, 0.3);
  in.ctx_y = Mat<double>::Constant(2, 1, -0.2);
  in.query_x = Mat<double>::Constant(1, 1, 0.3);
  const auto e = embed_tokens(P, in);
  EXPECT_EQ(e.row(0), e.row(1));
  // f_x(x) appears in the context token plus f_y(y); the query token is f_x(x) alone.
  ModelInputs<double> only_y = in;
  only_y.ctx_x.setZero();
  only_y.query_x.setZero();
  const auto ey = embed_tokens(P, only_y);
  const auto fx0 = ey.row(2);
  EXPECT_LT(((e.row(0) - (ey.row(0) - fx0)) - e.row(2)).norm(), 1e-12);
}

TEST(ModelTest, OutputsAreDistributions) {
  const auto cfg = small_config();
  Rng rng = make_stream(4);
  const auto P = init_params<double>(cfg, rng);
  const auto in = random_inputs<double>(cfg, 4, 7, 2, true, rng);
  const auto out = forward(P, in);
  const auto pol = out.policy();
  EXPECT_NEAR(std::accumulate(pol.probs.begin(), pol.probs.end(), 0.0), 1.0, 1e-12);
  for (int i = 0; i < out.n_target(); ++i) {
    const auto g = out.gmm(i);
    EXPECT_NEAR(std::accumulate(g.weights.begin(), g.weights.end(), 0.0), 1.0, 1e-12);
    for (double s : g.stds) EXPECT_GT(s, 0.0);
    EXPECT_NEAR(out.log_q(i, 0.3), gmm_log_prob(g, 0.3), 1e-12);
  }
  const auto again = forward(P, in);
  EXPECT_EQ(out.gmm_means, again.gmm_means);
  EXPECT_EQ(out.policy_log_probs, again.policy_log_probs);
}

TEST(ModelTest, ContextPermutationInvariance) {
  const auto cfg = small_config();
  Rng rng = make_stream(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto P = init_params<double>(cfg, rng);
    const auto in = random_inputs<double>(cfg, 6, 5, 2, trial % 2 == 0, rng);
    auto perm_in = in;
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < 6; ++i) {
      perm_in.ctx_x.row(i) = in.ctx_x.row(perm[i]);
      perm_in.ctx_y.row(i) = in.ctx_y.row(perm[i]);
    }
    const auto a = forward(P, in), b = forward(P, perm_in);
    EXPECT_LT((a.gmm_means - b.gmm_means).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((a.policy_log_probs - b.policy_log_probs).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ModelTest, QueryPermutationEquivariance) {
  const auto cfg = small_config();
  Rng rng = make_stream(15);
  for (int trial = 0; trial < 20; ++trial) {
    const auto P = init_params<double>(cfg, rng);
    const auto in = random_inputs<double>(cfg, 3 + trial % 3, 6, 2, trial % 2 == 1, rng);
    auto perm_in = in;
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < 6; ++i) perm_in.query_x.row(i) = in.query_x.row(perm[i]);
    const auto a = forward(P, in), b = forward(P, perm_in);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(b.policy_log_probs(i), a.policy_log_probs(perm[i]), 1e-10);
    EXPECT_LT((a.gmm_means - b.gmm_means).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ModelTest, MaskSoundness) {
  const auto cfg = small_config();
  Rng rng = make_stream(6);
  const auto P = init_params<double>(cfg, rng);
  const auto in = random_inputs<double>(cfg, 3, 4, 2, false, rng);
  auto q_changed = in;
  q_changed.query_x = random_mat<double>(4, 1, rng, 3.0);
  const auto a = forward(P, in), b = forward(P, q_changed);
  EXPECT_EQ(a.gmm_means, b.gmm_means);
  EXPECT_EQ(a.gmm_stds, b.gmm_stds);

  auto t_changed = in;
  t_changed.target_x = random_mat<double>(2, 1, rng, 3.0);
  ForwardCache<double> ca, cb;
  forward(P, in, &ca);
  forward(P, t_changed, &cb);
  for (int l = 0; l < cfg.n_layers; ++l) {
    EXPECT_EQ(ca.layers[l].mid.topRows(3), cb.layers[l].mid.topRows(3));
    EXPECT_EQ(ca.layers[l].input.topRows(3), cb.layers[l].input.topRows(3));
  }
  EXPECT_EQ(ca.trunk_out.topRows(3), cb.trunk_out.topRows(3));
}

TEST(ModelTest, TargetsIndependentWithoutContext) {
  const auto cfg = small_config();
  Rng rng = make_stream(7);
  const auto P = init_params<double>(cfg, rng);
  auto in = random_inputs<double>(cfg, 0, 3, 3, false, rng);
  const auto a = forward(P, in);
  in.target_x(1, 0) += 1.7;
  const auto b = forward(P, in);
  EXPECT_EQ(a.gmm_means.row(0), b.gmm_means.row(0));
  EXPECT_EQ(a.gmm_means.row(2), b.gmm_means.row(2));
  EXPECT_NE(a.gmm_means.row(1), b.gmm_means.row(1));
}

TEST(ModelTest, BernoulliHeadForBinaryPredictive) {
  auto cfg = small_config();
  cfg.binary_outcome = true;
  Rng rng = make_stream(8);
  const auto P = init_params<double>(cfg, rng);
  const auto pred = forward(P, random_inputs<double>(cfg, 2, 3, 2, false, rng));
  ASSERT_TRUE(pred.bernoulli);
  EXPECT_NEAR(std::exp(pred.log_q(0, 1.0)) + std::exp(pred.log_q(0, 0.0)), 1.0, 1e-12);
  const auto par = forward(P, random_inputs<double>(cfg, 2, 3, 2, true, rng));
  EXPECT_FALSE(par.bernoulli);
}

TEST(ModelTest, RejectsBadInputs) {
  const auto cfg = small_config();
  Rng rng = make_stream(9);
  const auto P = init_params<double>(cfg, rng);
  auto in = random_inputs<double>(cfg, 2, 2, 1, true, rng);
  in.target_params = {5};
  EXPECT_THROW(forward(P, in), InvalidArgument);
  in = random_inputs<double>(cfg, 2, 2, 1, true, rng);
  in.query_x = random_mat<double>(2, 3, rng);
  EXPECT_THROW(forward(P, in), InvalidArgument);
}

// Scalar objective sum_i a_i log q_i(v_i) + b log pi(choice).
double objective(const ModelParams<double>& P, const ModelInputs<double>& in, const OutputGrad<double>& g) {
  const auto out = forward(P, in);
  double s = 0.0;
  for (int i = 0; i < out.n_target(); ++i) s += g.target_coef[i] * out.log_q(i, g.target_values[i]);
  if (g.policy_choice >= 0) s += g.policy_coef * out.policy_log_probs[g.policy_choice];
  return s;
}

void check_gradient(const ModelConfig& cfg, bool param_targets, std::uint64_t seed) {
  Rng rng = make_stream(seed);
  auto P = init_params<double>(cfg, rng);
  const auto in = random_inputs<double>(cfg, 3, 4, 2, param_targets, rng);
  OutputGrad<double> g;
  g.target_values = {0.3, cfg.binary_outcome && !param_targets ? 0.0 : -0.8};
  if (cfg.binary_outcome && !param_targets) g.target_values[0] = 1.0;
  g.target_coef = {0.7, -1.3};
  g.policy_choice = 2;
  g.policy_coef = 0.9;

  ForwardCache<double> cache;
  const auto out = forward(P, in, &cache);
  std::vector<double> grad(P.data.size(), 0.0);
  backward(P, in, cache, out, g, std::span<double>(grad));

  const double h = 1e-6;
  for (const auto& t : P.layout->tensors()) {
    double num2 = 0.0, diff2 = 0.0;
    for (std::size_t k = 0; k < t.size; ++k) {
      const std::size_t i = t.offset + k;
      const double keep = P.data[i];
      P.data[i] = keep + h;
      const double fp = objective(P, in, g);
      P.data[i] = keep - h;
      const double fm = objective(P, in, g);
      P.data[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      num2 += fd * fd;
      diff2 += (fd - grad[i]) * (fd - grad[i]);
    }
    // Some tensors (key bias, policy output bias) have identically zero gradient.
    EXPECT_LT(std::sqrt(diff2), 1e-5 * std::sqrt(num2) + 1e-8) << t.name;
  }
}

TEST(ModelTest, GradientMatchesFiniteDifferencesParamTargets) {
  check_gradient(small_config(3, 2), true, 10);
}

TEST(ModelTest, GradientMatchesFiniteDifferencesPredictive) {
  check_gradient(small_config(2, 1), false, 11);
}

TEST(ModelTest, GradientMatchesFiniteDifferencesBernoulli) {
  auto cfg = small_config(2, 1);
  cfg.binary_outcome = true;
  check_gradient(cfg, false, 12);
}

}  // namespace
}  // namespace aline
