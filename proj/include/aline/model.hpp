#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "aline/rng.hpp"
#include "aline/types.hpp"

namespace aline {

struct ModelConfig {
  int emb_dim = 32;
  int ff_dim = 128;
  int n_layers = 3;
  int n_heads = 4;
  int n_mixture = 10;
  int param_dim = 1;
  int design_dim = 1;
  int outcome_dim = 1;
  bool binary_outcome = false;  // adds a Bernoulli channel for predictive targets

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class InitKind { FanIn, Zeros, Ones, Unit };

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  InitKind init = InitKind::FanIn;
  int fan_in = 1;
};

/// Named tensor table for a ModelConfig; parameters live in one flat buffer.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t size() const { return total_; }
  const TensorInfo& find(std::string_view name) const;

  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2,
        ff_b2;
  };
  struct Mlp {
    std::size_t w1, b1, w2, b2;
  };
  Mlp fx{}, fy{}, policy{};
  std::size_t ftheta = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0;
  std::size_t gmm_w1 = 0, gmm_b1 = 0, gmm_w2 = 0, gmm_b2 = 0;
  std::size_t bern_w = 0, bern_b = 0;

 private:
  std::size_t add(std::string name, std::vector<int> shape, InitKind init, int fan_in = 1);
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

/// Buffers viewed through Eigen maps. A fixed base alignment keeps the
/// vectorized summation order independent of where the buffer lands.
template <class T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct ModelParams {
  ModelConfig config;
  std::shared_ptr<const ParamLayout> layout;
  AlignedVec<T> data;

  std::span<T> tensor(std::string_view name);
  std::span<const T> tensor(std::string_view name) const;
};

/// Fan-in scaled uniform initialization of every linear map.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng);

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out{p.config, p.layout, AlignedVec<To>(p.data.begin(), p.data.end())};
  return out;
}

// --- Attention mask ---------------------------------------------------------

/// Tokens are ordered [context | query | target].
bool mask_allows(int n_ctx, int n_query, int n_target, int row, int col);

struct AttentionMask {
  int n_ctx = 0, n_query = 0, n_target = 0;
  std::vector<char> allow;  // row-major, size n*n
  int size() const { return n_ctx + n_query + n_target; }
  bool operator()(int r, int c) const { return allow[static_cast<std::size_t>(r) * size() + c] != 0; }
};

AttentionMask build_mask(int n_ctx, int n_query, int n_target);

/// Rows sharing one set of attended columns; `self` adds the diagonal entry.
/// Derived from the same rule as build_mask.
struct AttentionGroup {
  int row_begin = 0, row_end = 0;
  std::vector<std::pair<int, int>> col_ranges;  // half-open
  bool self = false;
  int rows() const { return row_end - row_begin; }
  int cols() const;
};
std::vector<AttentionGroup> attention_groups(int n_ctx, int n_query, int n_target);

// --- Output distributions ---------------------------------------------------

struct GmmParams {
  Vec weights;
  Vec means;
  Vec stds;
  double mean() const;
  double variance() const;
};

double gmm_log_prob(const GmmParams& g, double v);

struct PolicyDistribution {
  Vec probs;
};

enum class SelectMode { Sample, Argmax };

std::size_t select_action(const PolicyDistribution& policy, SelectMode mode, Rng& rng);

// --- Forward / backward -----------------------------------------------------

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Network inputs on the standardized scale.
template <class T>
struct ModelInputs {
  Mat<T> ctx_x;    // n_ctx x d_x
  Mat<T> ctx_y;    // n_ctx x d_y
  Mat<T> query_x;  // n_query x d_x
  bool param_targets = true;
  std::vector<int> target_params;  // parameter indices when param_targets
  Mat<T> target_x;                 // n_target x d_x otherwise

  int n_ctx() const { return static_cast<int>(ctx_x.rows()); }
  int n_query() const { return static_cast<int>(query_x.rows()); }
  int n_target() const {
    return param_targets ? static_cast<int>(target_params.size()) : static_cast<int>(target_x.rows());
  }
};

template <class T>
struct MlpCache {
  Mat<T> input, pre;  // pre-activation of the hidden layer
};

template <class T>
struct NormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <class T>
struct LayerCache {
  Mat<T> input;
  NormCache<T> norm1;
  Mat<T> n1, q, k, v, attn_out;
  // Attention weights per group and head: shared columns, then the diagonal.
  std::vector<std::vector<Mat<T>>> probs;
  std::vector<std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>>> self_probs;
  Mat<T> mid;
  NormCache<T> norm2;
  Mat<T> n2, ff_pre;
};

template <class T>
struct ForwardCache {
  std::vector<AttentionGroup> groups;
  MlpCache<T> fx, fy;
  std::vector<LayerCache<T>> layers;
  Mat<T> trunk_out;  // before final norm
  NormCache<T> final_norm;
  Mat<T> hidden;  // after final norm
  Mat<T> gmm_pre, policy_pre;
};

template <class T>
struct ForwardOutput {
  // Per target token, one row per token and one column per mixture component.
  Mat<T> gmm_logits, gmm_log_weights, gmm_means, gmm_raw_std, gmm_stds;
  Eigen::Matrix<T, Eigen::Dynamic, 1> bernoulli_logits;  // binary predictive targets only
  bool bernoulli = false;
  Eigen::Matrix<T, Eigen::Dynamic, 1> policy_logits, policy_log_probs;

  int n_target() const { return static_cast<int>(bernoulli ? bernoulli_logits.size() : gmm_means.rows()); }
  /// log q of a network-scale value for target token i.
  T log_q(int i, T value) const;
  /// Mixture in network-scale units (Bernoulli tokens give a two-point summary).
  GmmParams gmm(int i) const;
  PolicyDistribution policy() const;
};

/// d(loss)/d(log q_i) and d(loss)/d(log pi(choice)).
template <class T>
struct OutputGrad {
  std::vector<T> target_values;
  std::vector<T> target_coef;
  int policy_choice = -1;
  T policy_coef = 0;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token embeddings [context | query | target], one row per token.
template <class T>
Mat<T> embed_tokens(const ModelParams<T>& params, const ModelInputs<T>& in,
                    ForwardCache<T>* cache = nullptr);

/// Single forward pass. `cache` is filled when non-null (needed by backward).
template <class T>
ForwardOutput<T> forward(const ModelParams<T>& params, const ModelInputs<T>& in,
                         ForwardCache<T>* cache = nullptr);

/// Accumulates d(loss)/d(params) into `grad` (size = layout size).
template <class T>
void backward(const ModelParams<T>& params, const ModelInputs<T>& in, const ForwardCache<T>& cache,
              const ForwardOutput<T>& out, const OutputGrad<T>& g, std::span<T> grad);

inline constexpr double kStdFloor = 1e-4;

}  // namespace aline
