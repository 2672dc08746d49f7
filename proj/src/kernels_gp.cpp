#include "aline/kernels_gp.hpp"

#include <cmath>

namespace aline {

std::string kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::Rbf: return "rbf";
    case KernelKind::Matern32: return "matern32";
    case KernelKind::Matern52: return "matern52";
  }
  return "rbf";
}

KernelKind parse_kernel(const std::string& name) {
  if (name == "rbf") return KernelKind::Rbf;
  if (name == "matern32") return KernelKind::Matern32;
  if (name == "matern52") return KernelKind::Matern52;
  throw InvalidArgument("unknown kernel: " + name);
}

double KernelSpec::operator()(const Vec& a, const Vec& b) const {
  double r2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ls = lengthscales.size() == 1 ? lengthscales[0] : lengthscales[i];
    const double d = (a[i] - b[i]) / ls;
    r2 += d * d;
  }
  const double s2 = output_scale * output_scale;
  switch (kind) {
    case KernelKind::Rbf:
      return s2 * std::exp(-0.5 * r2);
    case KernelKind::Matern32: {
      const double r = std::sqrt(3.0 * r2);
      return s2 * (1.0 + r) * std::exp(-r);
    }
    case KernelKind::Matern52: {
      const double r = std::sqrt(5.0 * r2);
      return s2 * (1.0 + r + r * r / 3.0) * std::exp(-r);
    }
  }
  return 0.0;
}

Eigen::MatrixXd gram(const KernelSpec& k, std::span<const Design> a, std::span<const Design> b) {
  Eigen::MatrixXd g(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) g(i, j) = k(a[i].x, b[j].x);
  return g;
}

}  // namespace aline
