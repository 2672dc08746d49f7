#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "aline/kernels_gp.hpp"
#include "aline/types.hpp"

namespace aline {

inline constexpr double kGpAlpha = 1e-4;

/// Exact GP posterior with a zero prior mean and noise variance alpha.
class GpPosterior {
 public:
  GpPosterior(KernelSpec kernel, std::vector<Design> x, Vec y, double alpha = kGpAlpha);

  const KernelSpec& kernel() const { return kernel_; }
  double alpha() const { return alpha_; }
  double log_marginal_likelihood() const { return log_ml_; }
  std::size_t size() const { return x_.size(); }

  Eigen::VectorXd mean(std::span<const Design> pts) const;
  /// Posterior covariance of the latent function values.
  Eigen::MatrixXd latent_cov(std::span<const Design> a, std::span<const Design> b) const;
  Eigen::VectorXd latent_var(std::span<const Design> pts) const;

 private:
  KernelSpec kernel_;
  std::vector<Design> x_;
  Eigen::VectorXd weights_;  // (K + alpha I)^{-1} y
  Eigen::LLT<Eigen::MatrixXd> chol_;
  double alpha_;
  double log_ml_ = 0.0;
};

class GpFitFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KernelGrid {
  std::vector<KernelKind> kinds{KernelKind::Rbf, KernelKind::Matern32, KernelKind::Matern52};
  Vec lengthscales;
  Vec output_scales;
  /// 3 kernels x 16 log-spaced lengthscales x 8 log-spaced output scales.
  static KernelGrid standard(int design_dim);
};

Vec log_spaced(double lo, double hi, int n);

/// Picks the isotropic kernel maximizing the log marginal likelihood over the grid.
GpPosterior gp_fit(std::span<const Design> x, std::span<const double> y, const KernelGrid& grid,
                   double alpha = kGpAlpha);

enum class GpRule { Us, Vr, Epig, Rs };

/// Acquisition scores per pool point. Predictive variances for y add alpha.
Vec gp_scores(const GpPosterior& gp, GpRule rule, std::span<const Design> pool, std::span<const Design> targets);

/// Index of the largest score; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> scores);

}  // namespace aline
