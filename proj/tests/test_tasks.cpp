#include "aline/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "aline/math.hpp"

namespace aline {
namespace {

TEST(TasksTest, RegistryKnowsAllTasks) {
  for (const auto& name : task_names()) {
    const TaskDefinition t = make_task(name);
    EXPECT_EQ(t.name, name);
    EXPECT_NO_THROW(t.validate());
  }
  EXPECT_THROW(make_task("nope"), UnknownTask);
}

TEST(TasksTest, LocationFindingPriorInUnitSquare) {
  const auto task = make_task("location_finding");
  Rng rng = make_stream(1);
  for (int i = 0; i < 1000; ++i) {
    const Theta th = sample_theta(task, rng);
    ASSERT_EQ(th.values.size(), 2u);
    for (double v : th.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(TasksTest, CesSimplexSumsToOne) {
  const auto task = make_task("ces");
  Rng rng = make_stream(2);
  for (int i = 0; i < 1000; ++i) {
    const Theta th = sample_theta(task, rng);
    EXPECT_EQ(th.values[1] + th.values[2] + th.values[3], 1.0);
    EXPECT_GT(th.values[0], 0.0);
    EXPECT_LE(th.values[0], 1.0);
  }
}

TEST(TasksTest, PsychometricThresholdMean) {
  const auto task = make_task("psychometric");
  Rng rng = make_stream(3);
  const int n = 10000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += sample_theta(task, rng).values[0];
  const double se = 6.0 / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
  EXPECT_LT(std::abs(s / n), 3.0 * se);
}

TEST(TasksTest, GpDuplicatePointsShareValues) {
  Rng rng = make_stream(4);
  std::vector<Design> pts = {{{0.3}}, {{-1.0}}, {{0.3}}};
  const KernelSpec k{KernelKind::Rbf, 0.7, {1.0}};
  const Vec v = sample_gp_values(k, pts, rng);
  EXPECT_EQ(v[0], v[2]);
}

TEST(TasksTest, KernelAtZeroDistanceIsOutputScaleSquared) {
  for (auto kind : {KernelKind::Rbf, KernelKind::Matern32, KernelKind::Matern52}) {
    const KernelSpec k{kind, 0.6, {2.0}};
    EXPECT_DOUBLE_EQ(k(Vec{1.5}, Vec{1.5}), 0.36);
  }
}

TEST(TasksTest, GpMarginalVarianceMatchesOutputScale) {
  Rng rng = make_stream(5);
  const std::vector<Design> pt = {{{1.0}}};
  const int n = 1000;
  double s2 = 0.0, scale2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto draw = sample_gp_function(1, pt, {}, rng);
    s2 += draw.pool_values[0] * draw.pool_values[0];
    scale2 += draw.kernel.output_scale * draw.kernel.output_scale;
    EXPECT_GE(draw.kernel.output_scale, 0.1);
    EXPECT_LE(draw.kernel.output_scale, 1.0);
    for (double l : draw.kernel.lengthscales) {
      EXPECT_GE(l, 0.1);
      EXPECT_LE(l, 2.0);
    }
    EXPECT_EQ(draw.noise_std, 0.01);
  }
  EXPECT_NEAR(s2 / n, scale2 / n, 0.1 * scale2 / n);
}

TEST(TasksTest, GpDrawIsPermutationEquivariant) {
  std::vector<Design> pts;
  Rng src = make_stream(6);
  for (int i = 0; i < 12; ++i) pts.push_back({{uniform(src, -5, 5), uniform(src, -5, 5)}});
  std::vector<int> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), src);
  std::vector<Design> permuted;
  for (int p : perm) permuted.push_back(pts[p]);

  const KernelSpec k{KernelKind::Matern52, 0.9, {0.8, 1.7}};
  Rng a = make_stream(7), b = make_stream(7);
  const Vec va = sample_gp_values(k, pts, a);
  const Vec vb = sample_gp_values(k, permuted, b);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(vb[i], va[perm[i]]);
}

TEST(TasksTest, LocationFindingIntensity) {
  EXPECT_NEAR(location_finding::intensity({{0.2, 0.2}}, {{0.2, 0.2}}), 10000.1, 1e-9);
  const double d = std::sqrt(0.9999 / 2.0);
  const double mu = location_finding::intensity({{0.0, 0.0}}, {{d, d}});
  EXPECT_NEAR(mu, 0.1 + 1.0 / (1e-4 + 0.9999), 1e-12);
  EXPECT_NEAR(mu, 1.1, 1e-4);
  Rng rng = make_stream(8);
  const Observation y = location_finding_simulate({{0.3, 0.4}}, {{0.5, 0.5}}, rng, 0.0);
  EXPECT_DOUBLE_EQ(y.y[0], location_finding::intensity({{0.3, 0.4}}, {{0.5, 0.5}}));
}

TEST(TasksTest, CesUtilityLinearCase) {
  const double alpha[] = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  const double z[] = {3, 3, 3};
  EXPECT_NEAR(ces::utility(1.0, alpha, z), 3.0, 1e-12);
}

TEST(TasksTest, CesEqualBasketsHaveZeroMean) {
  const Theta th{{0.4, 0.2, 0.3, 0.5, 1.0}};
  const Design x{{10, 20, 30, 10, 20, 30}};
  EXPECT_EQ(ces::eta_moments(th, x).first, 0.0);
  Rng rng = make_stream(9);
  int above = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) above += ces_simulate(th, x, rng).y[0] > 0.5;
  EXPECT_NEAR(above / static_cast<double>(n), 0.5, 3 * 0.5 / std::sqrt(n));
}

TEST(TasksTest, CesOutcomesAreClipped) {
  const auto task = make_task("ces");
  Rng rng = make_stream(10);
  for (int i = 0; i < 100000; ++i) {
    const Theta th = sample_theta(task, rng);
    Design x;
    for (int k = 0; k < 6; ++k) x.x.push_back(uniform(rng, 0, 100));
    const double y = ces_simulate(th, x, rng).y[0];
    ASSERT_GE(y, ces::kEps);
    ASSERT_LE(y, 1.0 - ces::kEps);
  }
}

TEST(TasksTest, CesUtilityStableForTinyRho) {
  const double alpha[] = {0.2, 0.3, 0.5};
  const double z[] = {100, 100, 100};
  const double u = ces::utility(1e-9, alpha, z);
  EXPECT_TRUE(std::isfinite(u));
  EXPECT_NEAR(u, 100.0, 1e-4);
}

TEST(TasksTest, PsychometricKnownValues) {
  EXPECT_NEAR(psychometric_prob({{0.5, 1.0, 0.5, 0.0}}, {{0.5}}), 1.0 - std::exp(-1.0), 1e-12);
  const Theta th{{0.0, 0.5, 0.4, 0.2}};
  EXPECT_NEAR(psychometric_prob(th, {{-1e6}}), 0.4 * 0.2, 1e-12);
  EXPECT_NEAR(psychometric_prob(th, {{1e6}}), 0.4 * 0.2 + 0.8, 1e-12);
}

TEST(TasksTest, PsychometricMonotone) {
  const auto task = make_task("psychometric");
  Rng rng = make_stream(11);
  for (int i = 0; i < 200; ++i) {
    const Theta th = sample_theta(task, rng);
    double prev = -1.0;
    for (int k = 0; k <= 400; ++k) {
      const double p = psychometric_prob(th, {{-5.0 + 10.0 * k / 400}});
      ASSERT_GE(p, prev);
      ASSERT_GT(p, 0.0);
      ASSERT_LT(p, 1.0);
      prev = p;
    }
  }
}

TEST(TasksTest, TargetSpecifierSampling) {
  auto task = make_task("ces");
  Rng rng = make_stream(12);
  const auto t = sample_target_specifier(task, rng);
  ASSERT_TRUE(t.is_subset());
  EXPECT_EQ(t.subset().indices, (std::vector<int>{0, 1, 2, 3, 4}));

  task = make_task("gp1d");
  int predictive = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_target_specifier(task, rng);
    if (s.is_predictive()) {
      ++predictive;
      ASSERT_EQ(s.predictive().inputs.size(), 100u);
      for (const auto& d : s.predictive().inputs) ASSERT_TRUE(design_in_space(task, d));
    }
  }
  EXPECT_NEAR(predictive / static_cast<double>(n), 0.5, 3 * 0.5 / std::sqrt(n));

  task.target_config.clear();
  EXPECT_THROW(sample_target_specifier(task, rng), InvalidArgument);
}

TEST(TasksTest, QueryPools) {
  Rng rng = make_stream(13);
  const auto gp = make_task("gp1d");
  for (const auto& d : sample_query_pool(gp, 500, rng)) EXPECT_TRUE(design_in_space(gp, d));
  EXPECT_EQ(sample_query_pool(gp, 1, rng).size(), 1u);
  EXPECT_THROW(sample_query_pool(gp, 0, rng), InvalidArgument);

  const auto lf = make_task("location_finding");
  const int n = 10000;
  double m0 = 0.0, m1 = 0.0;
  for (const auto& d : sample_query_pool(lf, n, rng)) {
    m0 += d.x[0];
    m1 += d.x[1];
  }
  const double se = std::sqrt(1.0 / 12.0 / n);
  EXPECT_LT(std::abs(m0 / n - 0.5), 3 * se);
  EXPECT_LT(std::abs(m1 / n - 0.5), 3 * se);

  const auto psy = make_task("psychometric");
  const auto pool = sample_query_pool(psy, 200, rng);
  EXPECT_DOUBLE_EQ(pool.front().x[0], -5.0);
  EXPECT_DOUBLE_EQ(pool.back().x[0], 5.0);
  EXPECT_NEAR(pool[1].x[0] - pool[0].x[0], 10.0 / 199, 1e-12);
}

TEST(TasksTest, SimulationIsDeterministic) {
  for (const auto& name : task_names()) {
    const auto task = make_task(name);
    Rng a = make_stream(14, {1}), b = make_stream(14, {1});
    const Episode ea = sample_episode(task, a, 20);
    const Episode eb = sample_episode(task, b, 20);
    EXPECT_EQ(ea.theta.values, eb.theta.values);
    EXPECT_EQ(ea.target_values, eb.target_values);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto ya = ea.observe(task, i, a);
      const auto yb = eb.observe(task, i, b);
      EXPECT_EQ(ya, yb);
      EXPECT_TRUE(outcome_valid(task, ya));
    }
  }
}

TEST(TasksTest, CesCensoredLikelihoodIsFinite) {
  const auto task = make_task("ces");
  const Theta th{{0.5, 0.3, 0.3, 0.4, 4.0}};
  const Design x{{100, 0, 0, 0, 100, 0}};
  for (double y : {ces::kEps, 1.0 - ces::kEps, 0.3})
    EXPECT_TRUE(std::isfinite(log_likelihood(task, th, x, {{y}})));
}

}  // namespace
}  // namespace aline
