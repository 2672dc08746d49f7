// aline: train, evaluate and serve amortized active-learning policies.

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aline/eval.hpp"
#include "aline/oracle.hpp"
#include "aline/persistence.hpp"
#include "aline/service.hpp"
#include "aline/training.hpp"

#include "CLI11.hpp"
#include "httplib.h"

namespace fs = std::filesystem;
using namespace aline;

namespace {

// Config and usage problems exit 2, everything else that fails at runtime exits 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void print_error(const std::string& kind, const std::string& message) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string task;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    cfg = RunConfig::load(c.config);
    if (!c.task.empty() && c.task != cfg.task)
      throw UsageError("--task " + c.task + " conflicts with config task " + cfg.task);
  } else {
    cfg = RunConfig::from_json({{"task", c.task.empty() ? std::string("gp1d") : c.task}});
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
    cfg.eval.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::optional<int> epochs;
  std::string checkpoint;  // resume from
};

template <class T>
int run_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.common);
  if (a.epochs) {
    cfg.train.total_epochs = *a.epochs;
    if (*a.epochs == 0) cfg.train.warmup_epochs = 0;
    try {
      cfg.train.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }
  const TaskDefinition task = make_task(cfg.task);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");

  ModelParams<T> params;
  TrainState state;
  if (!a.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    if (ck.task != cfg.task) throw UsageError("checkpoint is for task " + ck.task + ", config is for " + cfg.task);
    if (!(ck.model == cfg.model)) throw UsageError("checkpoint model config differs from the run config");
    params = ck.to_params<T>();
    if (ck.training) {
      state.epoch = ck.training->epoch;
      state.adam.step = ck.training->adam_step;
      state.adam.m = ck.training->adam_m;
      state.adam.v = ck.training->adam_v;
    }
  } else {
    Rng init = make_stream(cfg.train.seed, {0xA11CEULL});
    params = init_params<T>(cfg.model, init);
  }

  auto snapshot = [&](const fs::path& path) {
    Checkpoint ck = Checkpoint::from_params(params, cfg.task);
    ck.training = TrainingSnapshot{state.epoch, state.adam.step, state.adam.m, state.adam.v, cfg.train.seed,
                                   train_config_json(cfg.train)};
    save_checkpoint(path, ck);
  };

  std::ofstream metrics(out / "metrics.jsonl", a.checkpoint.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open " + (out / "metrics.jsonl").string());
  TrainHooks hooks;
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    metrics << metrics_json(m) << "\n";
    metrics.flush();
    if (m.clipped) std::cerr << "epoch " << m.epoch << ": gradient norm " << m.grad_norm << " clipped\n";
  };
  hooks.on_checkpoint = [&](int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%06d.ckpt", epoch);
    snapshot(out / "checkpoints" / name);
  };
  try {
    train(params, state, task, cfg.train, hooks);
  } catch (const TrainingDiverged&) {
    snapshot(out / "diverged.ckpt");
    throw;
  }
  snapshot(out / "model.ckpt");
  std::cout << (out / "model.ckpt").string() << "\n";
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::vector<std::string> policies;
  std::string target;
  std::optional<int> runs;
};

template <class T>
int run_eval(const EvalArgs& a) {
  std::optional<Checkpoint> ck;
  Common common = a.common;
  if (!a.checkpoint.empty()) {
    ck = load_checkpoint(a.checkpoint);
    if (!common.task.empty() && common.task != ck->task)
      throw UsageError("--task " + common.task + " conflicts with checkpoint task " + ck->task);
    if (common.config.empty()) common.task = ck->task;
  }
  RunConfig cfg = load_config(common);
  if (ck && ck->task != cfg.task) throw UsageError("checkpoint is for task " + ck->task + ", config is for " + cfg.task);
  if (a.runs) {
    if (*a.runs < 2) throw UsageError("--runs must be >= 2");
    cfg.eval.n_runs = *a.runs;
  }
  const TaskDefinition task = make_task(cfg.task);
  if (!a.target.empty()) cfg.eval.target = parse_target(a.target, task);
  else if (cfg.eval_target) cfg.eval.target = cfg.eval_target;

  std::optional<ModelParams<T>> params;
  if (ck) params = ck->to_params<T>();
  const ModelParams<T>* p = params ? &*params : nullptr;

  std::vector<PolicyKind> policies;
  for (const auto& name : a.policies.empty() ? std::vector<std::string>{"aline", "random"} : a.policies) {
    try {
      policies.push_back(parse_policy(name));
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    if (policy_needs_model(policies.back()) && !p) throw UsageError("policy " + name + " needs --checkpoint");
  }

  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  std::map<std::string, std::vector<std::pair<std::string, MetricCurve>>> curves;
  for (PolicyKind policy : policies) {
    EvalReport report;
    if (task.kind == TaskKind::GpFunction) {
      report = rmse_eval<T>(p, task, policy, cfg.eval);
    } else {
      if (!p) throw UsageError("task " + cfg.task + " needs --checkpoint for evaluation");
      report = log_prob_eval<T>(*p, task, policy, cfg.eval);
      if (task.kind == TaskKind::LocationFinding || task.kind == TaskKind::Ces) {
        const EvalReport s = spce_eval<T>(p, task, policy, cfg.eval);
        report.spce = s.spce;
        report.spce_contrastive = s.spce_contrastive;
        report.spce_clamped = s.spce_clamped;
      }
    }
    const std::string name = policy_name(policy);
    write_text(out / ("eval_" + name + ".json"), report.to_json().dump(2) + "\n");
    if (report.rmse) curves["rmse"].emplace_back(name, *report.rmse);
    if (report.log_prob) curves["log_prob_true_theta"].emplace_back(name, *report.log_prob);
    if (report.spce) curves["spce"].emplace_back(name, *report.spce);
    if (report.spce_clamped > 0)
      std::cerr << name << ": " << report.spce_clamped << " non-finite log-likelihoods clamped\n";
  }
  for (const auto& [metric, c] : curves)
    write_text(out / (metric + ".svg"), render_svg(cfg.task + " " + metric, metric, c));
  std::cout << out.string() << "\n";
  return 0;
}

// --- serve ------------------------------------------------------------------

struct ServeArgs {
  std::vector<std::string> checkpoints;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string console;
  std::string event_log;
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  std::vector<service::ServedModel> models;
  for (const auto& path : a.checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    models.push_back({make_task(ck.task), std::make_shared<const ModelParams<double>>(ck.to_params<double>())});
  }
  std::optional<fs::path> log;
  if (!a.event_log.empty()) log = a.event_log;
  const bool replay = log && fs::exists(*log);
  service::SessionManager manager(models, log);
  if (replay) manager.recover(*log);
  service::SessionManager* active = &manager;

  httplib::Server server;
  std::optional<fs::path> console;
  if (!a.console.empty()) console = a.console;
  service::mount_routes(server, *active, console);
  if (!server.bind_to_port(a.host, a.port)) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(a.port));
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cerr << "serving " << active->size() << " sessions for";
  for (const auto& t : active->tasks()) std::cerr << " " << t;
  std::cerr << " on http://" << a.host << ":" << a.port << "\n";
  server.listen_after_bind();
  g_server = nullptr;
  return 0;
}

// --- simulate ---------------------------------------------------------------

struct SimulateArgs {
  Common common;
  int episodes = 1;
  std::optional<int> steps;
  std::optional<int> pool;
  std::string target;
};

int run_simulate(const SimulateArgs& a) {
  const RunConfig cfg = load_config(a.common);
  const TaskDefinition task = make_task(cfg.task);
  const int pool = a.pool.value_or(cfg.eval.pool_size);
  const int steps = a.steps.value_or(cfg.eval.horizon);
  if (a.episodes < 1) throw UsageError("--episodes must be >= 1");
  if (steps < 0 || steps > pool) throw UsageError("--steps must be in [0, pool size]");
  std::optional<TargetSpecifier> target;
  if (!a.target.empty()) target = parse_target(a.target, task);

  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (int e = 0; e < a.episodes; ++e) {
    Rng rng = make_stream(cfg.seed, {static_cast<std::uint64_t>(e)});
    const Episode ep = sample_episode(task, rng, pool, target);
    std::vector<std::size_t> order(ep.pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    History h;
    for (int t = 0; t < steps; ++t) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(t, order.size() - 1)(rng);
      std::swap(order[t], order[j]);
      h.push(ep.pool[order[t]], ep.observe(task, order[t], rng));
    }
    all.push_back(episode_fixture(task, ep, h));
  }
  const std::string text = a.episodes == 1 ? all[0].dump(2) : all.dump(2);
  if (a.common.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text(a.common.out, text + "\n");
  }
  return 0;
}

// --- oracle -----------------------------------------------------------------

int run_oracle(double tol) {
  bool ok = true;
  for (const auto& r : oracle::run_suite(tol)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.spec << " q=" << r.q_name << " seig=" << r.report.seig
              << " j=" << r.report.j << " gap=" << r.report.seig - r.report.j << " kl=" << r.report.expected_kl;
    if (!r.passed) std::cout << " " << r.detail;
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aline: amortized active learning and inference"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string precision;

  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "overrides the config seed");
    sub->add_option("--out", c.out, "output directory (file for simulate)");
    sub->add_option("--task", c.task, "task name");
  };

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a policy and inference head");
  add_common(train_cmd, train_args.common);
  train_cmd->add_option("--epochs", train_args.epochs, "overrides train.total_epochs");
  train_cmd->add_option("--checkpoint", train_args.checkpoint, "resume from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--precision", precision, "f32 or f64 (overrides the config)")
      ->check(CLI::IsMember({"f32", "f64"}));

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate policies and write reports and SVG curves");
  add_common(eval_cmd, eval_args.common);
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--policy", eval_args.policies, "aline|random|aline-us|gp-us|gp-vr|gp-epig (repeatable)");
  eval_cmd->add_option("--target", eval_args.target, "all | subset=i,j | predictive");
  eval_cmd->add_option("--runs", eval_args.runs, "overrides eval.n_runs");
  eval_cmd->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "run the session service");
  serve_cmd->add_option("--checkpoint", serve_args.checkpoints, "checkpoint per served task (repeatable)")
      ->required()
      ->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", serve_args.host, "bind address");
  serve_cmd->add_option("--port", serve_args.port, "port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--console", serve_args.console, "static console directory served at /console")
      ->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--event-log", serve_args.event_log, "append-only session log, replayed on start");

  SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "dump episode fixtures as JSON");
  add_common(sim_cmd, sim_args.common);
  sim_cmd->add_option("--episodes", sim_args.episodes, "number of episodes");
  sim_cmd->add_option("--steps", sim_args.steps, "random queries per episode");
  sim_cmd->add_option("--pool", sim_args.pool, "pool size");
  sim_cmd->add_option("--target", sim_args.target, "all | subset=i,j | predictive");

  double oracle_tol = 1e-10;
  auto* oracle_cmd = app.add_subcommand("oracle", "run the enumeration oracle suite");
  oracle_cmd->add_option("--tol", oracle_tol, "identity tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    print_error("usage", e.what());
    return 2;
  }

  try {
    auto dispatch = [&](auto f32, auto f64, const Common& c) {
      bool use_f64 = precision == "f64";
      if (precision.empty() && !c.config.empty()) use_f64 = RunConfig::load(c.config).precision == Precision::F64;
      return use_f64 ? f64() : f32();
    };
    if (*train_cmd)
      return dispatch([&] { return run_train<float>(train_args); }, [&] { return run_train<double>(train_args); },
                      train_args.common);
    if (*eval_cmd)
      return dispatch([&] { return run_eval<float>(eval_args); }, [&] { return run_eval<double>(eval_args); },
                      eval_args.common);
    if (*serve_cmd) return run_serve(serve_args);
    if (*sim_cmd) return run_simulate(sim_args);
    if (*oracle_cmd) return run_oracle(oracle_tol);
  } catch (const UsageError& e) {
    print_error("usage", e.what());
    return 2;
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return 2;
  } catch (const CheckpointError& e) {
    print_error("checkpoint", e.what());
    return 1;
  } catch (const TrainingDiverged& e) {
    print_error("diverged", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 2;
}
