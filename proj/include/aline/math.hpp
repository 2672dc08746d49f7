#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>

namespace aline {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)

inline double log_normal_pdf(double v, double mean, double sd) {
  const double z = (v - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

/// log Phi(z), accurate deep into the lower tail.
inline double log_ndtr(double z) {
  if (z > -30.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(-z) - kLogSqrt2Pi + std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

template <class T>
T logsumexp(std::span<const T> v) {
  if (v.empty()) return -std::numeric_limits<T>::infinity();
  const T m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  T s = 0;
  for (T x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace aline
