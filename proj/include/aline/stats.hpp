#pragma once

#include <span>
#include <vector>

#include "aline/types.hpp"

namespace aline {

/// Per-step mean with a normal-approximation 95% interval.
struct MetricCurve {
  Vec mean, se, lo, hi;
  std::size_t runs = 0;
};

/// `per_run[r][t]`; all runs must have the same length and there must be at least two.
MetricCurve summarize(std::span<const Vec> per_run);

/// True when the 95% intervals at step t do not overlap.
bool intervals_disjoint(const MetricCurve& a, const MetricCurve& b, std::size_t t);

}  // namespace aline
