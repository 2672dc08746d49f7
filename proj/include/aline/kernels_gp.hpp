#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aline/types.hpp"

namespace aline {

enum class KernelKind { Rbf, Matern32, Matern52 };

std::string kernel_name(KernelKind k);
KernelKind parse_kernel(const std::string& name);

/// Stationary kernel with amplitude `output_scale` (k(x,x) = output_scale^2)
/// and one lengthscale per input dimension.
struct KernelSpec {
  KernelKind kind = KernelKind::Rbf;
  double output_scale = 1.0;
  Vec lengthscales{1.0};

  double operator()(const Vec& a, const Vec& b) const;
};

Eigen::MatrixXd gram(const KernelSpec& k, std::span<const Design> a, std::span<const Design> b);

}  // namespace aline
