#include "aline/stats.hpp"

#include <cmath>

namespace aline {

MetricCurve summarize(std::span<const Vec> per_run) {
  if (per_run.size() < 2) throw InvalidArgument("summarize: need at least two runs");
  const std::size_t n = per_run.size(), len = per_run[0].size();
  MetricCurve c;
  c.runs = n;
  c.mean.assign(len, 0.0);
  c.se.assign(len, 0.0);
  for (const auto& r : per_run) {
    if (r.size() != len) throw InvalidArgument("summarize: ragged runs");
    for (std::size_t t = 0; t < len; ++t) c.mean[t] += r[t];
  }
  for (double& m : c.mean) m /= static_cast<double>(n);
  for (std::size_t t = 0; t < len; ++t) {
    double ss = 0.0;
    for (const auto& r : per_run) ss += (r[t] - c.mean[t]) * (r[t] - c.mean[t]);
    c.se[t] = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  }
  c.lo.resize(len);
  c.hi.resize(len);
  for (std::size_t t = 0; t < len; ++t) {
    c.lo[t] = c.mean[t] - 1.96 * c.se[t];
    c.hi[t] = c.mean[t] + 1.96 * c.se[t];
  }
  return c;
}

bool intervals_disjoint(const MetricCurve& a, const MetricCurve& b, std::size_t t) {
  return a.hi.at(t) < b.lo.at(t) || b.hi.at(t) < a.lo.at(t);
}

}  // namespace aline
