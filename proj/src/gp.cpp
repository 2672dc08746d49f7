#include "aline/gp.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

namespace aline {

GpPosterior::GpPosterior(KernelSpec kernel, std::vector<Design> x, Vec y, double alpha)
    : kernel_(std::move(kernel)), x_(std::move(x)), alpha_(alpha) {
  if (x_.empty()) throw InvalidArgument("gp: need at least one training point");
  if (!(alpha > 0.0)) throw InvalidArgument("gp: alpha must be positive");
  const auto n = static_cast<Eigen::Index>(x_.size());
  Eigen::MatrixXd K = gram(kernel_, x_, x_);
  K.diagonal().array() += alpha_;
  chol_.compute(K);
  if (chol_.info() != Eigen::Success) throw GpFitFailure("gp: Cholesky factorization failed");
  const Eigen::VectorXd yy = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  weights_ = chol_.solve(yy);
  const Eigen::MatrixXd L = chol_.matrixL();
  log_ml_ = -0.5 * yy.dot(weights_) - L.diagonal().array().log().sum() -
            0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

Eigen::VectorXd GpPosterior::mean(std::span<const Design> pts) const { return gram(kernel_, pts, x_) * weights_; }

Eigen::MatrixXd GpPosterior::latent_cov(std::span<const Design> a, std::span<const Design> b) const {
  const Eigen::MatrixXd ka = gram(kernel_, x_, a);
  const Eigen::MatrixXd kb = gram(kernel_, x_, b);
  return gram(kernel_, a, b) - ka.transpose() * chol_.solve(kb);
}

Eigen::VectorXd GpPosterior::latent_var(std::span<const Design> pts) const {
  const Eigen::MatrixXd kx = gram(kernel_, x_, pts);
  const Eigen::MatrixXd v = chol_.matrixL().solve(kx);
  Eigen::VectorXd out(static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i)
    out[i] = std::max(kernel_(pts[i].x, pts[i].x) - v.col(i).squaredNorm(), 0.0);
  return out;
}

Vec log_spaced(double lo, double hi, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i)
    v[i] = n == 1 ? lo : std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1));
  return v;
}

KernelGrid KernelGrid::standard(int design_dim) {
  KernelGrid g;
  const double sq = std::sqrt(static_cast<double>(design_dim));
  g.lengthscales = log_spaced(0.05 * sq, 5.0 * sq, 16);
  g.output_scales = log_spaced(0.05, 2.0, 8);
  return g;
}

GpPosterior gp_fit(std::span<const Design> x, std::span<const double> y, const KernelGrid& grid, double alpha) {
  if (x.empty() || x.size() != y.size()) throw InvalidArgument("gp_fit: need matching, nonempty x and y");
  const std::vector<Design> xs(x.begin(), x.end());
  const Vec ys(y.begin(), y.end());
  double best = -std::numeric_limits<double>::infinity();
  std::optional<GpPosterior> chosen;
  for (KernelKind kind : grid.kinds)
    for (double ls : grid.lengthscales)
      for (double os : grid.output_scales) {
        try {
          GpPosterior gp(KernelSpec{kind, os, {ls}}, xs, ys, alpha);
          if (gp.log_marginal_likelihood() > best) {
            best = gp.log_marginal_likelihood();
            chosen.emplace(std::move(gp));
          }
        } catch (const GpFitFailure&) {
        }
      }
  if (!chosen) throw GpFitFailure("gp_fit: every grid point failed to factorize");
  return std::move(*chosen);
}

Vec gp_scores(const GpPosterior& gp, GpRule rule, std::span<const Design> pool, std::span<const Design> targets) {
  Vec s(pool.size(), 0.0);
  if (rule == GpRule::Rs) return s;
  const Eigen::VectorXd vx = gp.latent_var(pool);
  if (rule == GpRule::Us) {
    for (std::size_t i = 0; i < pool.size(); ++i) s[i] = std::sqrt(vx[i]);
    return s;
  }
  if (targets.empty()) throw InvalidArgument("gp_scores: VR and EPIG need target inputs");
  const Eigen::MatrixXd c = gp.latent_cov(targets, pool);  // m x n
  const double a = gp.alpha();
  if (rule == GpRule::Vr) {
    for (std::size_t i = 0; i < pool.size(); ++i) s[i] = c.col(i).squaredNorm() / (vx[i] + a);
    return s;
  }
  const Eigen::VectorXd vt = gp.latent_var(targets);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index m = 0; m < c.rows(); ++m) {
      const double rho2 = c(m, i) * c(m, i) / ((vx[i] + a) * (vt[m] + a));
      acc += -0.5 * std::log1p(-std::min(rho2, 1.0 - 1e-15));
    }
    s[i] = acc / static_cast<double>(c.rows());
  }
  return s;
}

std::size_t argmax_lowest(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("argmax over empty scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

}  // namespace aline
