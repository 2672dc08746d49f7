#include "aline/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "aline/gp.hpp"
#include "aline/kernels.hpp"

namespace aline {

std::string policy_name(PolicyKind p) {
  switch (p) {
    case PolicyKind::Aline: return "aline";
    case PolicyKind::Random: return "random";
    case PolicyKind::AlineUs: return "aline-us";
    case PolicyKind::GpUs: return "gp-us";
    case PolicyKind::GpVr: return "gp-vr";
    case PolicyKind::GpEpig: return "gp-epig";
  }
  return "aline";
}

PolicyKind parse_policy(const std::string& name) {
  for (PolicyKind p : {PolicyKind::Aline, PolicyKind::Random, PolicyKind::AlineUs, PolicyKind::GpUs,
                       PolicyKind::GpVr, PolicyKind::GpEpig})
    if (policy_name(p) == name) return p;
  throw InvalidArgument("unknown policy: " + name);
}

bool policy_needs_model(PolicyKind p) { return p == PolicyKind::Aline || p == PolicyKind::AlineUs; }

namespace {

bool is_gp_policy(PolicyKind p) {
  return p == PolicyKind::GpUs || p == PolicyKind::GpVr || p == PolicyKind::GpEpig;
}

GpRule gp_rule(PolicyKind p) {
  switch (p) {
    case PolicyKind::GpUs: return GpRule::Us;
    case PolicyKind::GpVr: return GpRule::Vr;
    case PolicyKind::GpEpig: return GpRule::Epig;
    default: return GpRule::Rs;
  }
}

GpPosterior fit_history(const TaskDefinition& task, std::span<const HistoryPair> h) {
  std::vector<Design> x;
  Vec y;
  for (const auto& p : h) {
    x.push_back(p.design);
    y.push_back(p.outcome.y[0]);
  }
  return gp_fit(x, y, KernelGrid::standard(task.design_dim));
}

template <class T>
Mat<T> design_rows(const TaskDefinition& task, std::span<const Design> xs) {
  Mat<T> m(static_cast<Eigen::Index>(xs.size()), task.design_dim);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Vec e = encode_design(task, xs[i]);
    for (int k = 0; k < task.design_dim; ++k) m(static_cast<Eigen::Index>(i), k) = static_cast<T>(e[k]);
  }
  return m;
}

/// Runs `body(r)` for every run, in parallel when asked, rethrowing the first error.
template <class F>
void for_each_run(int n, bool parallel, F&& body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::max_threads()) if (parallel)
  for (int r = 0; r < n; ++r) {
    try {
      const kernels::FlushDenormals ftz;
      body(r);
    } catch (...) {
#pragma omp critical(aline_eval_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

std::span<const HistoryPair> prefix(const History& h, std::size_t t) {
  return std::span<const HistoryPair>(h.pairs()).first(t);
}

}  // namespace

template <class T>
ModelInputs<T> model_inputs(const TaskDefinition& task, std::span<const HistoryPair> history,
                            std::span<const Design> queries, const TargetSpecifier& target) {
  ModelInputs<T> in;
  in.ctx_x.resize(static_cast<Eigen::Index>(history.size()), task.design_dim);
  in.ctx_y.resize(static_cast<Eigen::Index>(history.size()), task.outcome_dim);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const Vec e = encode_design(task, history[i].design);
    for (int k = 0; k < task.design_dim; ++k) in.ctx_x(static_cast<Eigen::Index>(i), k) = static_cast<T>(e[k]);
    in.ctx_y(static_cast<Eigen::Index>(i), 0) = static_cast<T>(encode_outcome(task, history[i].outcome.y[0]));
  }
  in.query_x = design_rows<T>(task, queries);
  in.param_targets = target.is_subset();
  if (in.param_targets) {
    in.target_params = target.subset().indices;
  } else {
    in.target_x = design_rows<T>(task, target.predictive().inputs);
  }
  return in;
}

GmmParams raw_gmm(const TaskDefinition& task, const TargetSpecifier& target, const GmmParams& net, std::size_t i) {
  if (target.is_predictive() && task.binary_outcome) return net;
  const Affine a = target_affine(task, target, i);
  GmmParams g = net;
  for (double& m : g.means) m = a.inverse(m);
  for (double& s : g.stds) s *= std::abs(a.scale);
  return g;
}

template <class T>
RunRecord rollout_policy(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                         Episode episode, int horizon, SelectMode mode, Rng& obs_rng, Rng& policy_rng) {
  if (policy_needs_model(policy) && !params) throw InvalidArgument(policy_name(policy) + " needs a checkpoint");
  if (static_cast<int>(episode.pool.size()) < horizon) throw InvalidArgument("pool smaller than horizon");
  if (is_gp_policy(policy) && task.kind != TaskKind::GpFunction)
    throw InvalidArgument(policy_name(policy) + " applies to GP tasks only");
  if ((policy == PolicyKind::GpVr || policy == PolicyKind::GpEpig) && !episode.target.is_predictive())
    throw InvalidArgument(policy_name(policy) + " needs a predictive target");

  RunRecord rec{std::move(episode), {}, {}};
  const Episode& ep = rec.episode;
  std::vector<std::size_t> remaining(ep.pool.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  for (int t = 0; t < horizon; ++t) {
    std::vector<Design> cands;
    for (std::size_t i : remaining) cands.push_back(ep.pool[i]);
    std::size_t j = 0;
    switch (policy) {
      case PolicyKind::Aline: {
        const auto out = forward(*params, model_inputs<T>(task, rec.history.pairs(), cands, ep.target));
        j = select_action(out.policy(), mode, policy_rng);
        break;
      }
      case PolicyKind::AlineUs: {
        const auto tgt = TargetSpecifier::predictive_at(cands);
        const auto out = forward(*params, model_inputs<T>(task, rec.history.pairs(), {}, tgt));
        Vec var(cands.size());
        for (std::size_t i = 0; i < cands.size(); ++i) var[i] = out.gmm(static_cast<int>(i)).variance();
        j = argmax_lowest(var);
        break;
      }
      case PolicyKind::Random:
        j = std::uniform_int_distribution<std::size_t>(0, remaining.size() - 1)(policy_rng);
        break;
      default: {
        if (rec.history.empty()) {
          j = std::uniform_int_distribution<std::size_t>(0, remaining.size() - 1)(policy_rng);
        } else {
          const GpPosterior gp = fit_history(task, rec.history.pairs());
          std::span<const Design> targets;
          if (ep.target.is_predictive()) targets = ep.target.predictive().inputs;
          j = argmax_lowest(gp_scores(gp, gp_rule(policy), cands, targets));
        }
      }
    }
    const std::size_t idx = remaining[j];
    rec.history.push(ep.pool[idx], ep.observe(task, idx, obs_rng));
    rec.pool_indices.push_back(idx);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return rec;
}

template <class T>
std::vector<RunRecord> rollout_runs(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                                    const EvalConfig& cfg) {
  if (cfg.n_runs < 1) throw InvalidArgument("eval: n_runs must be >= 1");
  std::vector<RunRecord> out(cfg.n_runs);
  for_each_run(cfg.n_runs, cfg.parallel, [&](int r) {
    const auto ur = static_cast<std::uint64_t>(r);
    Rng ep_rng = make_stream(cfg.seed, {ur, 0});
    Rng obs_rng = make_stream(cfg.seed, {ur, 1});
    Rng pol_rng = make_stream(cfg.seed, {ur, 2});
    Episode ep = sample_episode(task, ep_rng, cfg.pool_size, cfg.target);
    out[r] = rollout_policy(params, task, policy, std::move(ep), cfg.horizon, cfg.mode, obs_rng, pol_rng);
  });
  return out;
}

std::vector<Design> evaluation_grid(const TaskDefinition& task, int n) {
  if (n < 2) throw InvalidArgument("grid needs at least two points");
  std::vector<Design> g;
  if (task.design_dim == 1) {
    for (int i = 0; i < n; ++i)
      g.push_back(Design{{task.design_lo[0] + (task.design_hi[0] - task.design_lo[0]) * i / (n - 1)}});
    return g;
  }
  if (task.design_dim != 2) throw InvalidArgument("grid supports 1D and 2D design spaces");
  const int side = std::max(2, static_cast<int>(std::lround(std::sqrt(static_cast<double>(n)))));
  for (int i = 0; i < side; ++i)
    for (int k = 0; k < side; ++k)
      g.push_back(Design{{task.design_lo[0] + (task.design_hi[0] - task.design_lo[0]) * i / (side - 1),
                          task.design_lo[1] + (task.design_hi[1] - task.design_lo[1]) * k / (side - 1)}});
  return g;
}

double rmse(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw InvalidArgument("rmse: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(truth.size()));
}

template <class T>
EvalReport rmse_eval(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                     const EvalConfig& cfg_in, RmseDump* dump) {
  if (task.kind != TaskKind::GpFunction) throw InvalidArgument("rmse_eval needs a GP task");
  EvalConfig cfg = cfg_in;
  const auto grid = evaluation_grid(task, cfg.grid_size);
  cfg.target = TargetSpecifier::predictive_at(grid);
  const bool use_gp = is_gp_policy(policy) || !params;
  const auto runs = rollout_runs(params, task, policy, cfg);

  std::vector<Vec> per_run(runs.size(), Vec(cfg.horizon + 1));
  if (dump) {
    dump->predictions.assign(runs.size(), std::vector<Vec>(cfg.horizon + 1));
    dump->truth.assign(runs.size(), Vec{});
  }
  for_each_run(static_cast<int>(runs.size()), cfg.parallel, [&](int r) {
    const RunRecord& rec = runs[r];
    const Vec& truth = rec.episode.gp->target_values;
    for (int t = 0; t <= cfg.horizon; ++t) {
      Vec pred(grid.size(), 0.0);
      if (use_gp) {
        if (t > 0) {
          const Eigen::VectorXd m = fit_history(task, prefix(rec.history, t)).mean(grid);
          pred.assign(m.data(), m.data() + m.size());
        }
      } else {
        const auto out = forward(*params, model_inputs<T>(task, prefix(rec.history, t), {}, rec.episode.target));
        for (std::size_t i = 0; i < grid.size(); ++i)
          pred[i] = raw_gmm(task, rec.episode.target, out.gmm(static_cast<int>(i)), i).mean();
      }
      per_run[r][t] = rmse(pred, truth);
      if (dump) dump->predictions[r][t] = std::move(pred);
    }
    if (dump) dump->truth[r] = truth;
  });

  EvalReport rep;
  rep.task = task.name;
  rep.policy = policy_name(policy);
  rep.runs = runs.size();
  rep.horizon = cfg.horizon;
  if (per_run.size() >= 2) rep.rmse = summarize(per_run);
  return rep;
}

template <class T>
EvalReport log_prob_eval(const ModelParams<T>& params, const TaskDefinition& task, PolicyKind policy,
                         const EvalConfig& cfg_in) {
  EvalConfig cfg = cfg_in;
  if (!cfg.target) {
    std::vector<int> all(task.param_dim);
    std::iota(all.begin(), all.end(), 0);
    cfg.target = TargetSpecifier::subset_of(all);
  }
  if (!cfg.target->is_subset()) throw InvalidArgument("log_prob_eval needs a parameter target");
  const auto runs = rollout_runs(&params, task, policy, cfg);
  std::vector<Vec> per_run(runs.size(), Vec(cfg.horizon + 1));
  for_each_run(static_cast<int>(runs.size()), cfg.parallel, [&](int r) {
    const RunRecord& rec = runs[r];
    const auto& idx = rec.episode.target.subset().indices;
    for (int t = 0; t <= cfg.horizon; ++t) {
      const auto out = forward(params, model_inputs<T>(task, prefix(rec.history, t), {}, rec.episode.target));
      double s = 0.0;
      for (std::size_t i = 0; i < idx.size(); ++i)
        s += gmm_log_prob(raw_gmm(task, rec.episode.target, out.gmm(static_cast<int>(i)), i),
                          rec.episode.theta.values[idx[i]]);
      per_run[r][t] = s / static_cast<double>(idx.size());
    }
  });
  EvalReport rep;
  rep.task = task.name;
  rep.policy = policy_name(policy);
  rep.runs = runs.size();
  rep.horizon = cfg.horizon;
  if (per_run.size() >= 2) rep.log_prob = summarize(per_run);
  return rep;
}

template <class T>
EvalReport spce_eval(const ModelParams<T>* params, const TaskDefinition& task, PolicyKind policy,
                     const EvalConfig& cfg_in) {
  if (task.kind == TaskKind::GpFunction) throw InvalidArgument("sPCE is not defined for GP tasks");
  if (cfg_in.spce_contrastive < 0) throw InvalidArgument("sPCE needs L >= 0");
  EvalConfig cfg = cfg_in;
  if (!cfg.target) {
    std::vector<int> all(task.param_dim);
    std::iota(all.begin(), all.end(), 0);
    cfg.target = TargetSpecifier::subset_of(all);
  }
  const auto runs = rollout_runs(params, task, policy, cfg);
  std::vector<Trajectory> trajs;
  for (const auto& rec : runs) {
    Trajectory tr{rec.episode.theta, {}, {}};
    for (const auto& p : rec.history.pairs()) {
      tr.designs.push_back(p.design);
      tr.outcomes.push_back(p.outcome);
    }
    trajs.push_back(std::move(tr));
  }
  const SpceResult res = spce_bound(task_loglik(task), task_prior(task), trajs, cfg.spce_contrastive,
                                    splitmix64(cfg.seed ^ 0x5bceULL), cfg.parallel);
  EvalReport rep;
  rep.task = task.name;
  rep.policy = policy_name(policy);
  rep.runs = runs.size();
  rep.horizon = cfg.horizon;
  rep.spce_contrastive = cfg.spce_contrastive;
  rep.spce_clamped = res.clamped;
  if (res.per_run.size() >= 2) rep.spce = res.curve;
  return rep;
}

namespace {

nlohmann::ordered_json curve_json(const MetricCurve& c) {
  nlohmann::ordered_json j;
  j["mean"] = c.mean;
  j["se"] = c.se;
  j["lo"] = c.lo;
  j["hi"] = c.hi;
  return j;
}

MetricCurve curve_from(const nlohmann::json& j, std::size_t runs) {
  MetricCurve c;
  c.mean = j.at("mean").get<Vec>();
  c.se = j.at("se").get<Vec>();
  c.lo = j.at("lo").get<Vec>();
  c.hi = j.at("hi").get<Vec>();
  c.runs = runs;
  return c;
}

}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["policy"] = policy;
  j["runs"] = runs;
  j["horizon"] = horizon;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  if (rmse) m["rmse"] = curve_json(*rmse);
  if (log_prob) m["log_prob_true_theta"] = curve_json(*log_prob);
  if (spce) {
    m["spce"] = curve_json(*spce);
    m["spce"]["contrastive"] = spce_contrastive;
    m["spce"]["clamped"] = spce_clamped;
  }
  j["metrics"] = m;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.task = j.at("task").get<std::string>();
  r.policy = j.at("policy").get<std::string>();
  r.runs = j.at("runs").get<std::size_t>();
  r.horizon = j.at("horizon").get<int>();
  const auto& m = j.at("metrics");
  if (m.contains("rmse")) r.rmse = curve_from(m["rmse"], r.runs);
  if (m.contains("log_prob_true_theta")) r.log_prob = curve_from(m["log_prob_true_theta"], r.runs);
  if (m.contains("spce")) {
    r.spce = curve_from(m["spce"], r.runs);
    r.spce_contrastive = m["spce"].at("contrastive").get<long>();
    r.spce_clamped = m["spce"].at("clamped").get<long>();
  }
  return r;
}

std::string render_svg(const std::string& title, const std::string& ylabel,
                       const std::vector<std::pair<std::string, MetricCurve>>& curves) {
  constexpr double W = 640, H = 400, L = 70, R = 150, TOP = 40, B = 50;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  double ylo = std::numeric_limits<double>::infinity(), yhi = -ylo;
  std::size_t n = 0;
  for (const auto& [name, c] : curves) {
    n = std::max(n, c.mean.size());
    for (std::size_t t = 0; t < c.mean.size(); ++t) {
      ylo = std::min({ylo, c.lo.empty() ? c.mean[t] : c.lo[t], c.mean[t]});
      yhi = std::max({yhi, c.hi.empty() ? c.mean[t] : c.hi[t], c.mean[t]});
    }
  }
  if (n < 2 || !std::isfinite(ylo)) throw InvalidArgument("plot needs curves with at least two steps");
  if (yhi - ylo < 1e-12) {
    ylo -= 0.5;
    yhi += 0.5;
  }
  const auto px = [&](double t) { return L + (W - L - R) * t / static_cast<double>(n - 1); };
  const auto py = [&](double v) { return TOP + (H - TOP - B) * (yhi - v) / (yhi - ylo); };

  std::ostringstream s;
  s << std::setprecision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << TOP << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ylo + (yhi - ylo) * k / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
    const double t = static_cast<double>(n - 1) * k / 4.0;
    s << "<text x=\"" << px(t) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << std::lround(t) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">step</text>\n";
  s << "<text x=\"18\" y=\"" << (TOP + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (TOP + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& [name, c] = curves[k];
    const char* col = colors[k % 6];
    if (!c.lo.empty()) {
      s << "<polygon fill=\"" << col << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t t = 0; t < c.mean.size(); ++t) s << px(static_cast<double>(t)) << "," << py(c.hi[t]) << " ";
      for (std::size_t t = c.mean.size(); t-- > 0;) s << px(static_cast<double>(t)) << "," << py(c.lo[t]) << " ";
      s << "\"/>\n";
    }
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t t = 0; t < c.mean.size(); ++t) s << px(static_cast<double>(t)) << "," << py(c.mean[t]) << " ";
    s << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << TOP + 18 * k + 10 << "\" fill=\"" << col << "\">" << name
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

#define ALINE_EVAL_INSTANTIATE(T)                                                                           \
  template ModelInputs<T> model_inputs<T>(const TaskDefinition&, std::span<const HistoryPair>,              \
                                          std::span<const Design>, const TargetSpecifier&);                \
  template RunRecord rollout_policy<T>(const ModelParams<T>*, const TaskDefinition&, PolicyKind, Episode, \
                                       int, SelectMode, Rng&, Rng&);                                       \
  template std::vector<RunRecord> rollout_runs<T>(const ModelParams<T>*, const TaskDefinition&, PolicyKind, \
                                                  const EvalConfig&);                                      \
  template EvalReport rmse_eval<T>(const ModelParams<T>*, const TaskDefinition&, PolicyKind,               \
                                   const EvalConfig&, RmseDump*);                                          \
  template EvalReport log_prob_eval<T>(const ModelParams<T>&, const TaskDefinition&, PolicyKind,           \
                                       const EvalConfig&);                                                 \
  template EvalReport spce_eval<T>(const ModelParams<T>*, const TaskDefinition&, PolicyKind, const EvalConfig&);

ALINE_EVAL_INSTANTIATE(float)
ALINE_EVAL_INSTANTIATE(double)

}  // namespace aline
