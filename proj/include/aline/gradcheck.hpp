#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aline/model.hpp"
#include "aline/tasks.hpp"

namespace aline {

struct TensorGradError {
  std::string name;
  double rel_error = 0.0;  // |g - g_fd| / max(|g|, |g_fd|, floor), Euclidean norms over the tensor
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

/// Central finite differences of nll_loss + pg_loss for one sampled episode,
/// in 64-bit precision. Actions, outcomes and rewards are frozen at a first
/// sampled rollout so the loss is a smooth function of the parameters.
std::vector<TensorGradError> combined_loss_gradcheck(const TaskDefinition& task, const ModelConfig& model,
                                                     int horizon, int pool_size, int target_count,
                                                     std::uint64_t seed, double step = 1e-6,
                                                     double floor = 1e-6);

/// Tiny configuration: emb 8, one layer, two heads.
ModelConfig tiny_model_config(const TaskDefinition& task);

}  // namespace aline
