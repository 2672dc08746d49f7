#include "aline/service.hpp"

#include <iomanip>
#include <random>
#include <sstream>

#include "aline/eval.hpp"
#include "aline/persistence.hpp"

namespace aline::service {

namespace {

ServiceError bad_request(const std::string& m) { return ServiceError(400, "bad_request", m); }

std::string iso_time(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

TargetSpecifier parse_target_json(const nlohmann::json& j, const TaskDefinition& task, std::string& label) {
  try {
    if (j.is_string()) {
      label = j.get<std::string>();
      return parse_target(label, task);
    }
    if (j.is_object() && j.contains("subset")) {
      auto t = TargetSpecifier::subset_of(j["subset"].get<std::vector<int>>());
      validate_target(t, task.param_dim);
      label = j.dump();
      return t;
    }
    if (j.is_object() && j.contains("predictive")) {
      std::vector<Design> xs;
      for (const auto& x : j["predictive"]) {
        Design d{x.is_number() ? Vec{x.get<double>()} : x.get<Vec>()};
        if (!design_in_space(task, d)) throw InvalidArgument("predictive input outside the design space");
        xs.push_back(std::move(d));
      }
      auto t = TargetSpecifier::predictive_at(std::move(xs));
      validate_target(t, task.param_dim);
      label = "predictive";
      return t;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, "malformed_target", e.what());
  } catch (const InvalidArgument& e) {
    throw ServiceError(400, "malformed_target", e.what());
  }
  throw ServiceError(400, "malformed_target", "target must be a string, {subset: [...]} or {predictive: [...]}");
}

std::string target_name(const TaskDefinition& task, const TargetSpecifier& t, std::size_t i) {
  if (t.is_subset()) {
    const int l = t.subset().indices[i];
    return l < static_cast<int>(task.param_names.size()) ? task.param_names[l] : "theta_" + std::to_string(l);
  }
  return "y*" + std::to_string(i);
}

nlohmann::ordered_json summarize_output(const TaskDefinition& task, const Session& s,
                                        const ForwardOutput<double>& out) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (int i = 0; i < out.n_target(); ++i) {
    const GmmParams g = raw_gmm(task, s.target, out.gmm(i), static_cast<std::size_t>(i));
    nlohmann::ordered_json e;
    e["target"] = target_name(task, s.target, static_cast<std::size_t>(i));
    if (s.target.is_predictive()) e["x"] = s.target.predictive().inputs[i].x;
    e["weights"] = g.weights;
    e["means"] = g.means;
    e["stds"] = g.stds;
    e["mean"] = g.mean();
    e["variance"] = g.variance();
    arr.push_back(std::move(e));
  }
  return arr;
}

}  // namespace

nlohmann::ordered_json posterior_summary(const ServedModel& model, const Session& s) {
  const auto out = forward(*model.params, model_inputs<double>(model.task, s.history.pairs(), {}, s.target));
  return summarize_output(model.task, s, out);
}

SessionManager::SessionManager(std::vector<ServedModel> models, std::optional<std::filesystem::path> event_log)
    : salt_(std::random_device{}()) {
  for (auto& m : models) {
    if (!m.params) throw InvalidArgument("served model without parameters");
    models_.emplace(m.task.name, std::move(m));
  }
  if (event_log) {
    log_.emplace(*event_log, std::ios::app);
    if (!*log_) throw std::runtime_error("cannot open event log " + event_log->string());
  }
}

std::vector<std::string> SessionManager::tasks() const {
  std::vector<std::string> t;
  for (const auto& [name, m] : models_) t.push_back(name);
  return t;
}

std::size_t SessionManager::size() const {
  std::shared_lock lock(mu_);
  return sessions_.size();
}

const ServedModel& SessionManager::model_for(const std::string& task) const {
  const auto it = models_.find(task);
  if (it == models_.end()) throw ServiceError(400, "unknown_task", "no model loaded for task: " + task);
  return it->second;
}

std::shared_ptr<Session> SessionManager::find(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "not_found", "no session " + id);
  return it->second;
}

std::string SessionManager::new_id() {
  std::ostringstream s;
  s << "s" << std::hex << std::setw(16) << std::setfill('0') << splitmix64(salt_ ^ splitmix64(++counter_));
  return s.str();
}

void SessionManager::append(const nlohmann::json& event) {
  if (!log_) return;
  std::lock_guard lock(log_mu_);
  *log_ << event.dump() << '\n';
  log_->flush();
}

nlohmann::ordered_json SessionManager::create(const nlohmann::json& body) {
  return create_locked(body, std::nullopt, true);
}

nlohmann::ordered_json SessionManager::create_locked(const nlohmann::json& body_in, std::optional<std::string> id,
                                                     bool log) {
  if (!body_in.is_object()) throw bad_request("body must be a JSON object");
  nlohmann::json body = body_in;
  for (auto it = body.begin(); it != body.end(); ++it)
    if (it.key() != "task" && it.key() != "target" && it.key() != "horizon" && it.key() != "pool_size" &&
        it.key() != "seed" && it.key() != "sampling")
      throw bad_request("unknown field " + it.key());
  if (!body.contains("task") || !body["task"].is_string()) throw ServiceError(400, "unknown_task", "task is required");
  const std::string task_name = body["task"].get<std::string>();
  const ServedModel& model = model_for(task_name);
  const TaskDefinition& task = model.task;
  if (!body.contains("target")) throw ServiceError(400, "malformed_target", "target is required");

  auto s = std::make_shared<Session>();
  s->task = task_name;
  s->target = parse_target_json(body["target"], task, s->target_label);
  try {
    s->horizon = body.value("horizon", task.horizon);
    const int pool_size = body.value("pool_size", task.pool_size);
    s->sampling = body.value("sampling", false);
    if (s->horizon < 0) throw bad_request("horizon must be >= 0");
    if (pool_size < 1) throw bad_request("pool_size must be >= 1");
    if (s->horizon > pool_size) throw bad_request("horizon exceeds pool_size");
    std::unique_lock lock(mu_);
    if (!id) id = new_id();
    if (sessions_.count(*id)) throw ServiceError(409, "conflict", "session id in use: " + *id);
    s->seed = body.contains("seed") ? body["seed"].get<std::uint64_t>() : splitmix64(salt_ + counter_ * 7919);
    body["seed"] = s->seed;
    Rng rng = make_stream(s->seed, {0});
    s->pool = sample_query_pool(task, pool_size, rng);
    s->id = *id;
    s->created = s->updated = std::chrono::system_clock::now();
    sessions_.emplace(s->id, s);
  } catch (const nlohmann::json::exception& e) {
    throw bad_request(e.what());
  }
  if (log) append({{"event", "create"}, {"id", s->id}, {"body", body}});
  std::lock_guard lock(s->mu);
  return state_locked(*s);
}

nlohmann::ordered_json SessionManager::propose(const std::string& id, std::optional<bool> sample) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return propose_locked(*s, sample, true);
}

nlohmann::ordered_json SessionManager::propose_locked(Session& s, std::optional<bool> sample, bool log) {
  if (s.step() >= s.horizon)
    throw ServiceError(409, "horizon_exhausted", "session has used its horizon of " + std::to_string(s.horizon));
  if (s.pool.empty()) throw ServiceError(409, "pool_empty", "no candidates left");
  if (s.proposal_reply) return *s.proposal_reply;

  const ServedModel& model = model_for(s.task);
  const auto out = forward(*model.params, model_inputs<double>(model.task, s.history.pairs(), s.pool, s.target));
  const PolicyDistribution pi = out.policy();
  const bool sampling = sample.value_or(s.sampling);
  Rng rng = make_stream(s.seed, {1, static_cast<std::uint64_t>(s.step())});
  const std::size_t j = select_action(pi, sampling ? SelectMode::Sample : SelectMode::Argmax, rng);

  nlohmann::ordered_json r;
  r["id"] = s.id;
  r["step"] = s.step();
  r["mode"] = sampling ? "sample" : "argmax";
  r["pool_index"] = j;
  r["design"] = s.pool[j].x;
  r["probabilities"] = pi.probs;
  r["posterior"] = summarize_output(model.task, s, out);
  s.proposal = j;
  s.proposal_reply = r;
  s.updated = std::chrono::system_clock::now();
  if (log) append({{"event", "propose"}, {"id", s.id}, {"sample", sampling}});
  return r;
}

nlohmann::ordered_json SessionManager::observe(const std::string& id, const nlohmann::json& body) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return observe_locked(*s, body, true);
}

nlohmann::ordered_json SessionManager::observe_locked(Session& s, const nlohmann::json& body, bool log) {
  if (!body.is_object() || !body.contains("y")) throw bad_request("body must be {\"y\": value}");
  Observation y;
  try {
    y.y = body["y"].is_array() ? body["y"].get<Vec>() : Vec{body["y"].get<double>()};
  } catch (const nlohmann::json::exception&) {
    throw ServiceError(422, "invalid_outcome", "y must be a number or an array of numbers");
  }
  if (!s.proposal) throw ServiceError(409, "no_proposal", "request a proposal before observing");
  const ServedModel& model = model_for(s.task);
  if (!outcome_valid(model.task, y))
    throw ServiceError(422, "invalid_outcome", "outcome outside the domain of task " + s.task);

  const std::size_t j = *s.proposal;
  s.history.push(s.pool[j], y);
  s.pool.erase(s.pool.begin() + static_cast<std::ptrdiff_t>(j));
  s.proposal.reset();
  s.proposal_reply.reset();
  s.updated = std::chrono::system_clock::now();
  if (log) append({{"event", "observe"}, {"id", s.id}, {"y", y.y}});

  nlohmann::ordered_json r;
  r["id"] = s.id;
  r["step"] = s.step();
  r["posterior"] = posterior_summary(model, s);
  return r;
}

nlohmann::ordered_json SessionManager::state(const std::string& id) const {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return state_locked(*s);
}

nlohmann::ordered_json SessionManager::state_locked(const Session& s) const {
  const ServedModel& model = model_for(s.task);
  nlohmann::ordered_json r;
  r["id"] = s.id;
  r["task"] = s.task;
  r["target"] = s.target_label;
  if (s.target.is_subset()) r["target_indices"] = s.target.subset().indices;
  r["horizon"] = s.horizon;
  r["step"] = s.step();
  r["mode"] = s.sampling ? "sample" : "argmax";
  r["seed"] = s.seed;
  auto hist = nlohmann::ordered_json::array();
  for (const auto& p : s.history.pairs()) hist.push_back({{"x", p.design.x}, {"y", p.outcome.y}});
  r["history"] = hist;
  auto pool = nlohmann::ordered_json::array();
  for (const auto& d : s.pool) pool.push_back(d.x);
  r["pool"] = pool;
  r["proposal"] = s.proposal_reply ? nlohmann::ordered_json((*s.proposal_reply)["pool_index"]) : nlohmann::ordered_json();
  r["posterior"] = posterior_summary(model, s);
  r["created"] = iso_time(s.created);
  r["updated"] = iso_time(s.updated);
  return r;
}

void SessionManager::remove(const std::string& id) {
  {
    std::unique_lock lock(mu_);
    if (!sessions_.erase(id)) throw ServiceError(404, "not_found", "no session " + id);
  }
  append({{"event", "delete"}, {"id", id}});
}

void SessionManager::recover(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read event log " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    const auto ev = nlohmann::json::parse(line);
    const std::string kind = ev.at("event");
    const std::string id = ev.at("id");
    if (kind == "create") {
      create_locked(ev.at("body"), id, false);
    } else if (kind == "delete") {
      std::unique_lock lock(mu_);
      sessions_.erase(id);
    } else {
      auto s = find(id);
      std::lock_guard lock(s->mu);
      if (kind == "propose") {
        propose_locked(*s, ev.at("sample").get<bool>(), false);
      } else if (kind == "observe") {
        observe_locked(*s, {{"y", ev.at("y")}}, false);
      } else {
        throw std::runtime_error("event log line " + std::to_string(n) + ": unknown event " + kind);
      }
    }
  }
}

}  // namespace aline::service
