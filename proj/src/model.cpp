#include "aline/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aline/math.hpp"

namespace aline {

void ModelConfig::validate() const {
  if (emb_dim < 1 || ff_dim < 1 || n_layers < 0 || n_heads < 1)
    throw InvalidArgument("model config: sizes must be positive");
  if (emb_dim % n_heads != 0) throw InvalidArgument("model config: emb_dim must be divisible by n_heads");
  if (n_mixture < 1) throw InvalidArgument("model config: n_mixture must be >= 1");
  if (param_dim < 1 || design_dim < 1 || outcome_dim < 1)
    throw InvalidArgument("model config: task dimensions must be positive");
}

// --- Layout -----------------------------------------------------------------

std::size_t ParamLayout::add(std::string name, std::vector<int> shape, InitKind init, int fan_in) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  tensors_.push_back({std::move(name), std::move(shape), total_, n, init, fan_in});
  total_ += n;
  return tensors_.back().offset;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int E = c.emb_dim, F = c.ff_dim, K = c.n_mixture;
  auto mlp = [&](const std::string& p, int in, int hid, int out) {
    Mlp m;
    m.w1 = add(p + ".w1", {hid, in}, InitKind::FanIn, in);
    m.b1 = add(p + ".b1", {hid}, InitKind::FanIn, in);
    m.w2 = add(p + ".w2", {out, hid}, InitKind::FanIn, hid);
    m.b2 = add(p + ".b2", {out}, InitKind::FanIn, hid);
    return m;
  };
  fx = mlp("embed.x", c.design_dim, F, E);
  fy = mlp("embed.y", c.outcome_dim, F, E);
  ftheta = add("embed.theta", {c.param_dim, E}, InitKind::Unit);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l);
    Layer L{};
    L.ln1_g = add(p + ".norm1.gain", {E}, InitKind::Ones);
    L.ln1_b = add(p + ".norm1.bias", {E}, InitKind::Zeros);
    L.wq = add(p + ".attn.wq", {E, E}, InitKind::FanIn, E);
    L.bq = add(p + ".attn.bq", {E}, InitKind::FanIn, E);
    L.wk = add(p + ".attn.wk", {E, E}, InitKind::FanIn, E);
    L.bk = add(p + ".attn.bk", {E}, InitKind::FanIn, E);
    L.wv = add(p + ".attn.wv", {E, E}, InitKind::FanIn, E);
    L.bv = add(p + ".attn.bv", {E}, InitKind::FanIn, E);
    L.wo = add(p + ".attn.wo", {E, E}, InitKind::FanIn, E);
    L.bo = add(p + ".attn.bo", {E}, InitKind::FanIn, E);
    L.ln2_g = add(p + ".norm2.gain", {E}, InitKind::Ones);
    L.ln2_b = add(p + ".norm2.bias", {E}, InitKind::Zeros);
    L.ff_w1 = add(p + ".ff.w1", {F, E}, InitKind::FanIn, E);
    L.ff_b1 = add(p + ".ff.b1", {F}, InitKind::FanIn, E);
    L.ff_w2 = add(p + ".ff.w2", {E, F}, InitKind::FanIn, F);
    L.ff_b2 = add(p + ".ff.b2", {E}, InitKind::FanIn, F);
    layers.push_back(L);
  }
  lnf_g = add("final_norm.gain", {E}, InitKind::Ones);
  lnf_b = add("final_norm.bias", {E}, InitKind::Zeros);
  // One hidden layer of width emb_dim per mixture component.
  gmm_w1 = add("head.gmm.w1", {K, E, E}, InitKind::FanIn, E);
  gmm_b1 = add("head.gmm.b1", {K, E}, InitKind::FanIn, E);
  gmm_w2 = add("head.gmm.w2", {K, 3, E}, InitKind::FanIn, E);
  gmm_b2 = add("head.gmm.b2", {K, 3}, InitKind::FanIn, E);
  if (c.binary_outcome) {
    bern_w = add("head.bernoulli.w", {1, E}, InitKind::FanIn, E);
    bern_b = add("head.bernoulli.b", {1}, InitKind::FanIn, E);
  }
  policy = mlp("head.policy", E, F, 1);
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw InvalidArgument("no tensor named " + std::string(name));
}

template <class T>
std::span<T> ModelParams<T>::tensor(std::string_view name) {
  const auto& t = layout->find(name);
  return {data.data() + t.offset, t.size};
}

template <class T>
std::span<const T> ModelParams<T>::tensor(std::string_view name) const {
  const auto& t = layout->find(name);
  return {data.data() + t.offset, t.size};
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  ModelParams<T> p;
  p.config = cfg;
  p.layout = std::make_shared<ParamLayout>(cfg);
  p.data.assign(p.layout->size(), T(0));
  for (const auto& t : p.layout->tensors()) {
    T* d = p.data.data() + t.offset;
    switch (t.init) {
      case InitKind::Zeros: std::fill(d, d + t.size, T(0)); break;
      case InitKind::Ones: std::fill(d, d + t.size, T(1)); break;
      case InitKind::Unit:
        for (std::size_t i = 0; i < t.size; ++i) d[i] = static_cast<T>(uniform(rng, -1.0, 1.0));
        break;
      case InitKind::FanIn: {
        const double b = 1.0 / std::sqrt(static_cast<double>(t.fan_in));
        for (std::size_t i = 0; i < t.size; ++i) d[i] = static_cast<T>(uniform(rng, -b, b));
        break;
      }
    }
  }
  return p;
}

// --- Mask -------------------------------------------------------------------

bool mask_allows(int n_ctx, int n_query, int n_target, int r, int c) {
  const int q0 = n_ctx, t0 = n_ctx + n_query, n = t0 + n_target;
  if (r < 0 || c < 0 || r >= n || c >= n) return false;
  if (c < n_ctx) return true;  // every token reads the context
  if (r < n_ctx) return false;  // context reads only context
  if (r == c) return true;
  if (r < t0) return c >= t0;  // queries also read targets
  (void)q0;
  return false;  // targets read context and themselves
}

AttentionMask build_mask(int n_ctx, int n_query, int n_target) {
  if (n_ctx < 0 || n_query < 0 || n_target < 0) throw InvalidArgument("build_mask: negative count");
  AttentionMask m{n_ctx, n_query, n_target, {}};
  const int n = m.size();
  m.allow.assign(static_cast<std::size_t>(n) * n, 0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) m.allow[static_cast<std::size_t>(r) * n + c] = mask_allows(n_ctx, n_query, n_target, r, c);
  return m;
}

int AttentionGroup::cols() const {
  int n = 0;
  for (const auto& [b, e] : col_ranges) n += e - b;
  return n;
}

std::vector<AttentionGroup> attention_groups(int n_ctx, int n_query, int n_target) {
  const int t0 = n_ctx + n_query, n = t0 + n_target;
  std::vector<AttentionGroup> g;
  if (n_ctx > 0) g.push_back({0, n_ctx, {{0, n_ctx}}, false});
  if (n_query > 0) {
    AttentionGroup q{n_ctx, t0, {}, true};
    if (n_ctx > 0) q.col_ranges.push_back({0, n_ctx});
    if (n_target > 0) q.col_ranges.push_back({t0, n});
    g.push_back(std::move(q));
  }
  if (n_target > 0) {
    AttentionGroup t{t0, n, {}, true};
    if (n_ctx > 0) t.col_ranges.push_back({0, n_ctx});
    g.push_back(std::move(t));
  }
  return g;
}

// --- Distributions ----------------------------------------------------------

double GmmParams::mean() const {
  double m = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) m += weights[k] * means[k];
  return m;
}

double GmmParams::variance() const {
  const double mu = mean();
  double v = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double d = means[k] - mu;
    v += weights[k] * (stds[k] * stds[k] + d * d);
  }
  return v;
}

double gmm_log_prob(const GmmParams& g, double v) {
  double terms[64];
  std::vector<double> big;
  double* t = terms;
  if (g.weights.size() > 64) {
    big.resize(g.weights.size());
    t = big.data();
  }
  for (std::size_t k = 0; k < g.weights.size(); ++k)
    t[k] = std::log(g.weights[k]) + log_normal_pdf(v, g.means[k], g.stds[k]);
  return logsumexp(std::span<const double>(t, g.weights.size()));
}

std::size_t select_action(const PolicyDistribution& policy, SelectMode mode, Rng& rng) {
  const auto& p = policy.probs;
  if (p.empty()) throw InvalidArgument("select_action: empty policy");
  if (mode == SelectMode::Argmax) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = i;
    return best;
  }
  const double u = uniform(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0) continue;
    acc += p[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

template <class T>
T ForwardOutput<T>::log_q(int i, T value) const {
  if (bernoulli) {
    const T l = bernoulli_logits[i];
    const T z = value > T(0.5) ? l : -l;
    return -softplus(-z);
  }
  const int K = static_cast<int>(gmm_means.cols());
  T m = -std::numeric_limits<T>::infinity();
  T terms[64];
  for (int k = 0; k < K; ++k) {
    const T s = gmm_stds(i, k);
    const T z = (value - gmm_means(i, k)) / s;
    terms[k] = gmm_log_weights(i, k) - T(0.5) * z * z - std::log(s) - T(kLogSqrt2Pi);
    m = std::max(m, terms[k]);
  }
  T acc = 0;
  for (int k = 0; k < K; ++k) acc += std::exp(terms[k] - m);
  return m + std::log(acc);
}

template <class T>
GmmParams ForwardOutput<T>::gmm(int i) const {
  GmmParams g;
  if (bernoulli) {
    const double p = sigmoid(static_cast<double>(bernoulli_logits[i]));
    g.weights = {1.0 - p, p};
    g.means = {0.0, 1.0};
    g.stds = {kStdFloor, kStdFloor};
    return g;
  }
  const int K = static_cast<int>(gmm_means.cols());
  for (int k = 0; k < K; ++k) {
    g.weights.push_back(std::exp(static_cast<double>(gmm_log_weights(i, k))));
    g.means.push_back(static_cast<double>(gmm_means(i, k)));
    g.stds.push_back(static_cast<double>(gmm_stds(i, k)));
  }
  return g;
}

template <class T>
PolicyDistribution ForwardOutput<T>::policy() const {
  PolicyDistribution p;
  p.probs.resize(policy_log_probs.size());
  for (Eigen::Index i = 0; i < policy_log_probs.size(); ++i)
    p.probs[i] = std::exp(static_cast<double>(policy_log_probs[i]));
  return p;
}

// --- Kernels ----------------------------------------------------------------

namespace {

template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using CMap = Eigen::Map<const Mat<T>>;
template <class T>
using MMap = Eigen::Map<Mat<T>>;

template <class T>
Eigen::Map<const RowVector<T>> row_of(const T* p, int n) {
  return Eigen::Map<const RowVector<T>>(p, n);
}
template <class T>
Eigen::Map<RowVector<T>> row_of(T* p, int n) {
  return Eigen::Map<RowVector<T>>(p, n);
}

template <class T>
Mat<T> linear(const Mat<T>& X, const T* w, const T* b, int out, int in) {
  Mat<T> Y(X.rows(), out);
  if (X.rows() == 0) return Y;
  Y.noalias() = X * CMap<T>(w, out, in).transpose();
  Y.rowwise() += row_of(b, out);
  return Y;
}

template <class T>
Mat<T> linear_backward(const Mat<T>& dY, const Mat<T>& X, const T* w, T* dw, T* db, int out, int in) {
  if (dY.rows() == 0) return Mat<T>(0, in);
  MMap<T>(dw, out, in).noalias() += dY.transpose() * X;
  row_of(db, out) += dY.colwise().sum();
  Mat<T> dX(dY.rows(), in);
  dX.noalias() = dY * CMap<T>(w, out, in);
  return dX;
}

template <class T>
Mat<T> mlp_forward(const T* base, const ParamLayout::Mlp& m, int in, int hid, int out, const Mat<T>& X,
                   MlpCache<T>* c) {
  Mat<T> pre = linear(X, base + m.w1, base + m.b1, hid, in);
  Mat<T> h = pre.cwiseMax(T(0));
  Mat<T> y = linear(h, base + m.w2, base + m.b2, out, hid);
  if (c) {
    c->input = X;
    c->pre = std::move(pre);
  }
  return y;
}

template <class T>
Mat<T> mlp_backward(const T* base, T* grad, const ParamLayout::Mlp& m, int in, int hid, int out,
                    const MlpCache<T>& c, const Mat<T>& dY) {
  const Mat<T> h = c.pre.cwiseMax(T(0));
  Mat<T> dh = linear_backward(dY, h, base + m.w2, grad + m.w2, grad + m.b2, out, hid);
  dh.array() *= (c.pre.array() > T(0)).template cast<T>();
  return linear_backward(dh, c.input, base + m.w1, grad + m.w1, grad + m.b1, hid, in);
}

constexpr double kNormEps = 1e-5;

template <class T>
Mat<T> layer_norm(const Mat<T>& X, const T* g, const T* b, NormCache<T>* c) {
  const auto n = X.rows(), E = X.cols();
  Mat<T> xhat(n, E);
  Vector<T> rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mu = X.row(r).mean();
    const T var = (X.row(r).array() - mu).square().mean();
    rstd[r] = T(1) / std::sqrt(var + T(kNormEps));
    xhat.row(r) = (X.row(r).array() - mu) * rstd[r];
  }
  Mat<T> Y = (xhat.array().rowwise() * row_of(g, static_cast<int>(E)).array()).rowwise() +
             row_of(b, static_cast<int>(E)).array();
  if (c) {
    c->xhat = std::move(xhat);
    c->rstd = std::move(rstd);
  }
  return Y;
}

template <class T>
Mat<T> layer_norm_backward(const NormCache<T>& c, const T* g, T* dg, T* db, const Mat<T>& dY) {
  const auto n = dY.rows();
  const int E = static_cast<int>(dY.cols());
  if (n == 0) return Mat<T>(0, E);
  row_of(dg, E) += (dY.array() * c.xhat.array()).colwise().sum().matrix();
  row_of(db, E) += dY.colwise().sum();
  const Mat<T> dxhat = dY.array().rowwise() * row_of(g, E).array();
  Mat<T> dX(n, E);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dX.row(r) = c.rstd[r] * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dX;
}

template <class T>
struct AttnParams {
  const T *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

template <class T>
Mat<T> gather_rows(const Mat<T>& M, const AttentionGroup& g) {
  Mat<T> out(g.cols(), M.cols());
  int r = 0;
  for (const auto& [b, e] : g.col_ranges) {
    out.middleRows(r, e - b) = M.middleRows(b, e - b);
    r += e - b;
  }
  return out;
}

template <class T>
void scatter_add_rows(Mat<T>& M, const AttentionGroup& g, const Mat<T>& src) {
  int r = 0;
  for (const auto& [b, e] : g.col_ranges) {
    M.middleRows(b, e - b) += src.middleRows(r, e - b);
    r += e - b;
  }
}

template <class T>
Mat<T> attention(const Mat<T>& X, const AttnParams<T>& p, const std::vector<AttentionGroup>& groups, int heads,
                 LayerCache<T>* c) {
  const int n = static_cast<int>(X.rows()), E = static_cast<int>(X.cols()), dh = E / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> Q = linear(X, p.wq, p.bq, E, E);
  Mat<T> K = linear(X, p.wk, p.bk, E, E);
  Mat<T> V = linear(X, p.wv, p.bv, E, E);
  Mat<T> out(n, E);
  std::vector<std::vector<Mat<T>>> probs(groups.size());
  std::vector<std::vector<Vector<T>>> self_probs(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const int R = g.rows(), r0 = g.row_begin;
    const Mat<T> Kc = gather_rows(K, g), Vc = gather_rows(V, g);
    for (int h = 0; h < heads; ++h) {
      const int o = h * dh;
      const auto Qh = Q.block(r0, o, R, dh);
      Mat<T> S(R, Kc.rows());
      S.noalias() = Qh * Kc.middleCols(o, dh).transpose();
      S *= scale;
      Vector<T> ss = Vector<T>::Zero(R);
      if (g.self) ss = (Qh.array() * K.block(r0, o, R, dh).array()).rowwise().sum() * scale;
      for (int r = 0; r < R; ++r) {
        T m = S.cols() > 0 ? S.row(r).maxCoeff() : -std::numeric_limits<T>::infinity();
        if (g.self) m = std::max(m, ss[r]);
        S.row(r) = (S.row(r).array() - m).exp();
        T z = S.row(r).sum();
        if (g.self) {
          ss[r] = std::exp(ss[r] - m);
          z += ss[r];
        }
        S.row(r) /= z;
        ss[r] /= z;
      }
      auto oh = out.block(r0, o, R, dh);
      oh.noalias() = S * Vc.middleCols(o, dh);
      if (g.self) oh.array() += V.block(r0, o, R, dh).array().colwise() * ss.array();
      probs[gi].push_back(std::move(S));
      self_probs[gi].push_back(std::move(ss));
    }
  }
  Mat<T> Y = linear(out, p.wo, p.bo, E, E);
  if (c) {
    c->q = std::move(Q);
    c->k = std::move(K);
    c->v = std::move(V);
    c->attn_out = std::move(out);
    c->probs = std::move(probs);
    c->self_probs = std::move(self_probs);
  }
  return Y;
}

template <class T>
Mat<T> attention_backward(const LayerCache<T>& c, const std::vector<AttentionGroup>& groups, int heads,
                          const AttnParams<T>& p, const ParamLayout::Layer& L, T* grad, const Mat<T>& dY) {
  const int n = static_cast<int>(dY.rows()), E = static_cast<int>(dY.cols()), dh = E / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Mat<T> dOut = linear_backward(dY, c.attn_out, p.wo, grad + L.wo, grad + L.bo, E, E);
  Mat<T> dQ = Mat<T>::Zero(n, E), dK = Mat<T>::Zero(n, E), dV = Mat<T>::Zero(n, E);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const int R = g.rows(), r0 = g.row_begin;
    const Mat<T> Kc = gather_rows(c.k, g), Vc = gather_rows(c.v, g);
    Mat<T> dKc = Mat<T>::Zero(Kc.rows(), E), dVc = Mat<T>::Zero(Vc.rows(), E);
    for (int h = 0; h < heads; ++h) {
      const int o = h * dh;
      const Mat<T>& P = c.probs[gi][h];
      const Vector<T>& ps = c.self_probs[gi][h];
      const auto dOh = dOut.block(r0, o, R, dh);
      Mat<T> dS(R, P.cols());
      dS.noalias() = dOh * Vc.middleCols(o, dh).transpose();
      Vector<T> acc = (P.array() * dS.array()).rowwise().sum();
      Vector<T> dss;
      if (g.self) {
        dss = (dOh.array() * c.v.block(r0, o, R, dh).array()).rowwise().sum();
        acc.array() += ps.array() * dss.array();
        dss = (ps.array() * (dss - acc).array()) * scale;
      }
      dS = (P.array() * (dS.colwise() - acc).array()) * scale;
      dVc.middleCols(o, dh).noalias() += P.transpose() * dOh;
      dQ.block(r0, o, R, dh).noalias() += dS * Kc.middleCols(o, dh);
      dKc.middleCols(o, dh).noalias() += dS.transpose() * c.q.block(r0, o, R, dh);
      if (g.self) {
        dV.block(r0, o, R, dh).array() += dOh.array().colwise() * ps.array();
        dQ.block(r0, o, R, dh).array() += c.k.block(r0, o, R, dh).array().colwise() * dss.array();
        dK.block(r0, o, R, dh).array() += c.q.block(r0, o, R, dh).array().colwise() * dss.array();
      }
    }
    scatter_add_rows(dK, g, dKc);
    scatter_add_rows(dV, g, dVc);
  }
  Mat<T> dX = linear_backward(dQ, c.n1, p.wq, grad + L.wq, grad + L.bq, E, E);
  dX += linear_backward(dK, c.n1, p.wk, grad + L.wk, grad + L.bk, E, E);
  dX += linear_backward(dV, c.n1, p.wv, grad + L.wv, grad + L.bv, E, E);
  return dX;
}

template <class T>
AttnParams<T> attn_params(const T* base, const ParamLayout::Layer& L) {
  return {base + L.wq, base + L.bq, base + L.wk, base + L.bk,
          base + L.wv, base + L.bv, base + L.wo, base + L.bo};
}

template <class T>
void check_inputs(const ModelConfig& cfg, const ModelInputs<T>& in) {
  auto bad = [](const std::string& what) { throw InvalidArgument("model inputs: " + what); };
  if (in.ctx_x.rows() != in.ctx_y.rows()) bad("context x/y row mismatch");
  if (in.ctx_x.rows() > 0 && in.ctx_x.cols() != cfg.design_dim) bad("context design dimension");
  if (in.ctx_y.rows() > 0 && in.ctx_y.cols() != cfg.outcome_dim) bad("context outcome dimension");
  if (in.query_x.rows() > 0 && in.query_x.cols() != cfg.design_dim) bad("query design dimension");
  if (in.param_targets) {
    for (int l : in.target_params)
      if (l < 0 || l >= cfg.param_dim) bad("target parameter index out of range");
  } else if (in.target_x.rows() > 0 && in.target_x.cols() != cfg.design_dim) {
    bad("target design dimension");
  }
}

}  // namespace

// --- Forward ----------------------------------------------------------------

template <class T>
Mat<T> embed_tokens(const ModelParams<T>& P, const ModelInputs<T>& in, ForwardCache<T>* cache) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = *P.layout;
  check_inputs(cfg, in);
  const int E = cfg.emb_dim, F = cfg.ff_dim;
  const int nc = in.n_ctx(), nq = in.n_query(), nt = in.n_target();
  const int n_fx = nc + nq + (in.param_targets ? 0 : nt);
  Mat<T> xs(n_fx, cfg.design_dim);
  if (nc) xs.topRows(nc) = in.ctx_x;
  if (nq) xs.middleRows(nc, nq) = in.query_x;
  if (!in.param_targets && nt) xs.bottomRows(nt) = in.target_x;

  const T* base = P.data.data();
  const Mat<T> ex = mlp_forward(base, L.fx, cfg.design_dim, F, E, xs, cache ? &cache->fx : nullptr);
  Mat<T> ctx_y = in.ctx_y;
  if (nc == 0) ctx_y.resize(0, cfg.outcome_dim);
  const Mat<T> ey = mlp_forward(base, L.fy, cfg.outcome_dim, F, E, ctx_y, cache ? &cache->fy : nullptr);

  Mat<T> h(nc + nq + nt, E);
  if (nc) h.topRows(nc) = ex.topRows(nc) + ey;
  if (nq) h.middleRows(nc, nq) = ex.middleRows(nc, nq);
  if (nt) {
    if (in.param_targets) {
      for (int i = 0; i < nt; ++i) h.row(nc + nq + i) = row_of(base + L.ftheta + in.target_params[i] * E, E);
    } else {
      h.bottomRows(nt) = ex.bottomRows(nt);
    }
  }
  return h;
}

template <class T>
ForwardOutput<T> forward(const ModelParams<T>& P, const ModelInputs<T>& in, ForwardCache<T>* cache) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = *P.layout;
  const int E = cfg.emb_dim, F = cfg.ff_dim, K = cfg.n_mixture, H = cfg.n_heads;
  const int nc = in.n_ctx(), nq = in.n_query(), nt = in.n_target();
  const T* base = P.data.data();

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  c.groups = attention_groups(nc, nq, nt);
  c.layers.assign(cfg.n_layers, {});

  Mat<T> x = embed_tokens(P, in, keep ? &c : nullptr);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& Ly = L.layers[l];
    auto& lc = c.layers[l];
    NormCache<T> n1c;
    Mat<T> n1 = layer_norm(x, base + Ly.ln1_g, base + Ly.ln1_b, keep ? &lc.norm1 : &n1c);
    Mat<T> a = attention(n1, attn_params(base, Ly), c.groups, H, keep ? &lc : nullptr);
    Mat<T> mid = x + a;
    NormCache<T> n2c;
    Mat<T> n2 = layer_norm(mid, base + Ly.ln2_g, base + Ly.ln2_b, keep ? &lc.norm2 : &n2c);
    Mat<T> pre = linear(n2, base + Ly.ff_w1, base + Ly.ff_b1, F, E);
    Mat<T> f = linear(Mat<T>(pre.cwiseMax(T(0))), base + Ly.ff_w2, base + Ly.ff_b2, E, F);
    Mat<T> next = mid + f;
    if (keep) {
      lc.input = std::move(x);
      lc.n1 = std::move(n1);
      lc.mid = std::move(mid);
      lc.n2 = std::move(n2);
      lc.ff_pre = std::move(pre);
    }
    x = std::move(next);
  }
  Mat<T> hidden = layer_norm(x, base + L.lnf_g, base + L.lnf_b, &c.final_norm);
  if (keep) c.trunk_out = std::move(x);

  ForwardOutput<T> out;
  out.bernoulli = cfg.binary_outcome && !in.param_targets;
  const Mat<T> ht = hidden.bottomRows(nt);
  if (out.bernoulli) {
    out.bernoulli_logits = (ht * CMap<T>(base + L.bern_w, 1, E).transpose()).col(0).array() + base[L.bern_b];
  } else {
    Mat<T> pre = linear(ht, base + L.gmm_w1, base + L.gmm_b1, K * E, E);
    const Mat<T> r = pre.cwiseMax(T(0));
    out.gmm_logits.resize(nt, K);
    out.gmm_means.resize(nt, K);
    out.gmm_raw_std.resize(nt, K);
    for (int k = 0; k < K; ++k) {
      const Mat<T> o = linear(Mat<T>(r.middleCols(k * E, E)), base + L.gmm_w2 + k * 3 * E,
                              base + L.gmm_b2 + k * 3, 3, E);
      out.gmm_logits.col(k) = o.col(0);
      out.gmm_means.col(k) = o.col(1);
      out.gmm_raw_std.col(k) = o.col(2);
    }
    out.gmm_log_weights.resize(nt, K);
    out.gmm_stds.resize(nt, K);
    for (int i = 0; i < nt; ++i) {
      const T m = out.gmm_logits.row(i).maxCoeff();
      const T lse = m + std::log((out.gmm_logits.row(i).array() - m).exp().sum());
      out.gmm_log_weights.row(i) = out.gmm_logits.row(i).array() - lse;
      for (int k = 0; k < K; ++k) out.gmm_stds(i, k) = softplus(out.gmm_raw_std(i, k)) + T(kStdFloor);
    }
    if (keep) c.gmm_pre = std::move(pre);
  }

  if (nq > 0) {
    const Mat<T> hq = hidden.middleRows(nc, nq);
    Mat<T> pre = linear(hq, base + L.policy.w1, base + L.policy.b1, F, E);
    out.policy_logits = linear(Mat<T>(pre.cwiseMax(T(0))), base + L.policy.w2, base + L.policy.b2, 1, F).col(0);
    const T m = out.policy_logits.maxCoeff();
    const T lse = m + std::log((out.policy_logits.array() - m).exp().sum());
    out.policy_log_probs = out.policy_logits.array() - lse;
    if (keep) c.policy_pre = std::move(pre);
  } else {
    out.policy_logits.resize(0);
    out.policy_log_probs.resize(0);
  }
  if (keep) c.hidden = std::move(hidden);

  const bool finite = out.gmm_means.allFinite() && out.gmm_stds.allFinite() &&
                      out.gmm_log_weights.allFinite() && out.bernoulli_logits.allFinite() &&
                      out.policy_log_probs.allFinite();
  if (!finite) throw NumericalError("non-finite activations in forward pass");
  return out;
}

// --- Backward ---------------------------------------------------------------

template <class T>
void backward(const ModelParams<T>& P, const ModelInputs<T>& in, const ForwardCache<T>& c,
              const ForwardOutput<T>& out, const OutputGrad<T>& g, std::span<T> grad_span) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = *P.layout;
  const int E = cfg.emb_dim, F = cfg.ff_dim, K = cfg.n_mixture, H = cfg.n_heads;
  const int nc = in.n_ctx(), nq = in.n_query(), nt = in.n_target(), n = nc + nq + nt;
  const T* base = P.data.data();
  T* grad = grad_span.data();

  Mat<T> dhidden = Mat<T>::Zero(n, E);

  const bool any_target = std::any_of(g.target_coef.begin(), g.target_coef.end(),
                                      [](T a) { return a != T(0); });
  if (nt > 0 && any_target) {
    const Mat<T> ht = c.hidden.bottomRows(nt);
    if (out.bernoulli) {
      Mat<T> dl(nt, 1);
      for (int i = 0; i < nt; ++i) {
        const T p = T(sigmoid(static_cast<double>(out.bernoulli_logits[i])));
        dl(i, 0) = g.target_coef[i] * (g.target_values[i] - p);
      }
      dhidden.bottomRows(nt) += linear_backward(dl, ht, base + L.bern_w, grad + L.bern_w, grad + L.bern_b, 1, E);
    } else {
      Mat<T> dout(nt, 3 * K);  // per component: logit, mean, raw std
      for (int i = 0; i < nt; ++i) {
        const T a = g.target_coef[i];
        const T v = g.target_values[i];
        T lp[64];
        T m = -std::numeric_limits<T>::infinity();
        for (int k = 0; k < K; ++k) {
          const T s = out.gmm_stds(i, k);
          const T z = (v - out.gmm_means(i, k)) / s;
          lp[k] = out.gmm_log_weights(i, k) - T(0.5) * z * z - std::log(s) - T(kLogSqrt2Pi);
          m = std::max(m, lp[k]);
        }
        T tot = 0;
        for (int k = 0; k < K; ++k) tot += std::exp(lp[k] - m);
        const T lq = m + std::log(tot);
        for (int k = 0; k < K; ++k) {
          const T resp = std::exp(lp[k] - lq);
          const T w = std::exp(out.gmm_log_weights(i, k));
          const T s = out.gmm_stds(i, k);
          const T d = v - out.gmm_means(i, k);
          const T raw = out.gmm_raw_std(i, k);
          const T dsd = resp * (d * d / (s * s * s) - T(1) / s);
          const T sig = T(1) / (T(1) + std::exp(-raw));
          dout(i, 3 * k + 0) = a * (resp - w);
          dout(i, 3 * k + 1) = a * resp * d / (s * s);
          dout(i, 3 * k + 2) = a * dsd * sig;
        }
      }
      const Mat<T> r = c.gmm_pre.cwiseMax(T(0));
      Mat<T> dr(nt, K * E);
      for (int k = 0; k < K; ++k) {
        const Mat<T> dok = dout.middleCols(3 * k, 3);
        dr.middleCols(k * E, E) = linear_backward(dok, Mat<T>(r.middleCols(k * E, E)), base + L.gmm_w2 + k * 3 * E,
                                                  grad + L.gmm_w2 + k * 3 * E, grad + L.gmm_b2 + k * 3, 3, E);
      }
      dr.array() *= (c.gmm_pre.array() > T(0)).template cast<T>();
      dhidden.bottomRows(nt) += linear_backward(dr, ht, base + L.gmm_w1, grad + L.gmm_w1, grad + L.gmm_b1, K * E, E);
    }
  }

  if (nq > 0 && g.policy_choice >= 0 && g.policy_coef != T(0)) {
    Mat<T> dl(nq, 1);
    for (int j = 0; j < nq; ++j)
      dl(j, 0) = g.policy_coef * ((j == g.policy_choice ? T(1) : T(0)) - std::exp(out.policy_log_probs[j]));
    const Mat<T> r = c.policy_pre.cwiseMax(T(0));
    Mat<T> dr = linear_backward(dl, r, base + L.policy.w2, grad + L.policy.w2, grad + L.policy.b2, 1, F);
    dr.array() *= (c.policy_pre.array() > T(0)).template cast<T>();
    dhidden.middleRows(nc, nq) += linear_backward(dr, Mat<T>(c.hidden.middleRows(nc, nq)), base + L.policy.w1,
                                                  grad + L.policy.w1, grad + L.policy.b1, F, E);
  }

  Mat<T> dx = layer_norm_backward(c.final_norm, base + L.lnf_g, grad + L.lnf_g, grad + L.lnf_b, dhidden);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& Ly = L.layers[l];
    const auto& lc = c.layers[l];
    // next = mid + ff(norm2(mid))
    Mat<T> dh = linear_backward(dx, Mat<T>(lc.ff_pre.cwiseMax(T(0))), base + Ly.ff_w2, grad + Ly.ff_w2,
                                grad + Ly.ff_b2, E, F);
    dh.array() *= (lc.ff_pre.array() > T(0)).template cast<T>();
    const Mat<T> dn2 = linear_backward(dh, lc.n2, base + Ly.ff_w1, grad + Ly.ff_w1, grad + Ly.ff_b1, F, E);
    Mat<T> dmid = dx + layer_norm_backward(lc.norm2, base + Ly.ln2_g, grad + Ly.ln2_g, grad + Ly.ln2_b, dn2);
    // mid = input + attn(norm1(input))
    const Mat<T> dn1 = attention_backward(lc, c.groups, H, attn_params(base, Ly), Ly, grad, dmid);
    dx = dmid + layer_norm_backward(lc.norm1, base + Ly.ln1_g, grad + Ly.ln1_g, grad + Ly.ln1_b, dn1);
  }

  const int n_fx = nc + nq + (in.param_targets ? 0 : nt);
  Mat<T> dex(n_fx, E);
  if (nc) dex.topRows(nc) = dx.topRows(nc);
  if (nq) dex.middleRows(nc, nq) = dx.middleRows(nc, nq);
  if (nt) {
    if (in.param_targets) {
      for (int i = 0; i < nt; ++i) row_of(grad + L.ftheta + in.target_params[i] * E, E) += dx.row(nc + nq + i);
    } else {
      dex.bottomRows(nt) = dx.bottomRows(nt);
    }
  }
  mlp_backward(base, grad, L.fx, cfg.design_dim, F, E, c.fx, dex);
  if (nc) mlp_backward(base, grad, L.fy, cfg.outcome_dim, F, E, c.fy, Mat<T>(dx.topRows(nc)));
}

#define ALINE_INSTANTIATE(T)                                                                        \
  template struct ModelParams<T>;                                                                  \
  template ModelParams<T> init_params<T>(const ModelConfig&, Rng&);                                \
  template struct ForwardOutput<T>;                                                                \
  template Mat<T> embed_tokens<T>(const ModelParams<T>&, const ModelInputs<T>&, ForwardCache<T>*); \
  template ForwardOutput<T> forward<T>(const ModelParams<T>&, const ModelInputs<T>&, ForwardCache<T>*); \
  template void backward<T>(const ModelParams<T>&, const ModelInputs<T>&, const ForwardCache<T>&,  \
                            const ForwardOutput<T>&, const OutputGrad<T>&, std::span<T>);

ALINE_INSTANTIATE(float)
ALINE_INSTANTIATE(double)

}  // namespace aline
