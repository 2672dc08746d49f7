#pragma once

#include "aline/model.hpp"

namespace aline::testing {

template <class T>
Mat<T> random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat<T> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<T>(normal(rng, 0.0, scale));
  return m;
}

template <class T>
ModelInputs<T> random_inputs(const ModelConfig& c, int n_ctx, int n_query, int n_target, bool param_targets,
                             Rng& rng) {
  ModelInputs<T> in;
  in.ctx_x = random_mat<T>(n_ctx, c.design_dim, rng);
  in.ctx_y = random_mat<T>(n_ctx, c.outcome_dim, rng);
  in.query_x = random_mat<T>(n_query, c.design_dim, rng);
  in.param_targets = param_targets;
  if (param_targets) {
    for (int i = 0; i < n_target; ++i) in.target_params.push_back(i % c.param_dim);
  } else {
    in.target_x = random_mat<T>(n_target, c.design_dim, rng);
  }
  return in;
}

inline ModelConfig small_config(int param_dim = 2, int design_dim = 1) {
  ModelConfig c;
  c.emb_dim = 16;
  c.ff_dim = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_mixture = 3;
  c.param_dim = param_dim;
  c.design_dim = design_dim;
  return c;
}

}  // namespace aline::testing
