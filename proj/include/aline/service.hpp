#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "aline/model.hpp"
#include "aline/tasks.hpp"
#include "json.hpp"

namespace aline::service {

/// Error with a stable machine-readable code and its HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

/// A loaded checkpoint; parameters are immutable once served.
struct ServedModel {
  TaskDefinition task;
  std::shared_ptr<const ModelParams<double>> params;
};

struct Session {
  std::string id;
  std::string task;
  TargetSpecifier target;
  std::string target_label;
  int horizon = 0;
  bool sampling = false;
  std::uint64_t seed = 0;
  History history;
  std::vector<Design> pool;  // remaining candidates
  std::optional<std::size_t> proposal;  // position in `pool`
  std::optional<nlohmann::ordered_json> proposal_reply;
  std::chrono::system_clock::time_point created, updated;
  mutable std::mutex mu;

  int step() const { return static_cast<int>(history.step()); }
};

/// Posterior or predictive summary per target token, in raw units.
nlohmann::ordered_json posterior_summary(const ServedModel& model, const Session& s);

class SessionManager {
 public:
  explicit SessionManager(std::vector<ServedModel> models, std::optional<std::filesystem::path> event_log = {});

  /// Body: {task, target, horizon, pool_size?, seed?, sampling?}. Returns the full session state.
  nlohmann::ordered_json create(const nlohmann::json& body);
  /// Idempotent until the next observation. `sample` overrides the session mode.
  nlohmann::ordered_json propose(const std::string& id, std::optional<bool> sample = {});
  /// Body: {y: number | [number]}.
  nlohmann::ordered_json observe(const std::string& id, const nlohmann::json& body);
  nlohmann::ordered_json state(const std::string& id) const;
  void remove(const std::string& id);

  std::size_t size() const;
  std::vector<std::string> tasks() const;

  /// Rebuilds sessions from an event log written by a previous instance.
  void recover(const std::filesystem::path& log);

 private:
  std::shared_ptr<Session> find(const std::string& id) const;
  const ServedModel& model_for(const std::string& task) const;
  nlohmann::ordered_json create_locked(const nlohmann::json& body, std::optional<std::string> id, bool log);
  nlohmann::ordered_json propose_locked(Session& s, std::optional<bool> sample, bool log);
  nlohmann::ordered_json observe_locked(Session& s, const nlohmann::json& body, bool log);
  nlohmann::ordered_json state_locked(const Session& s) const;
  void append(const nlohmann::json& event);
  std::string new_id();

  std::map<std::string, ServedModel> models_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_;
  std::mutex log_mu_;
  std::optional<std::ofstream> log_;
};

}  // namespace aline::service

namespace httplib {
class Server;
}

namespace aline::service {

/// Registers the /v1 routes and, when given, serves `console_dir` under /console.
void mount_routes(httplib::Server& server, SessionManager& manager,
                  const std::optional<std::filesystem::path>& console_dir = {});

}  // namespace aline::service
