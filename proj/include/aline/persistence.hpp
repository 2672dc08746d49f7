#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aline/eval.hpp"
#include "aline/model.hpp"
#include "aline/training.hpp"
#include "json.hpp"

namespace aline {

// --- Checkpoints ------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ShapeMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedFile : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  bool operator==(const TensorEntry&) const = default;
};

struct TrainingSnapshot {
  int epoch = 0;
  long adam_step = 0;
  std::vector<double> adam_m, adam_v;
  std::uint64_t seed = 0;  // episode streams are derived from (seed, epoch, episode)
  nlohmann::json train_config = nlohmann::json::object();
  bool operator==(const TrainingSnapshot&) const = default;
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  ModelConfig model;
  std::string task;
  std::vector<TensorEntry> tensors;
  std::optional<TrainingSnapshot> training;

  template <class T>
  static Checkpoint from_params(const ModelParams<T>& params, const std::string& task);
  /// Throws ShapeMismatch naming the first missing, duplicated or misshapen tensor.
  void validate() const;
  template <class T>
  ModelParams<T> to_params() const;

  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

// --- Run configuration ------------------------------------------------------

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

enum class Precision { F32, F64 };

struct RunConfig {
  std::string task = "gp1d";
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  Precision precision = Precision::F32;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  int checkpoint_every = 0;
  std::optional<TargetSpecifier> eval_target;

  /// Unknown keys and out-of-range values raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
};

nlohmann::json train_config_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);

/// `all`, `subset=i,j` or `predictive` (the task's evaluation grid).
TargetSpecifier parse_target(const std::string& spec, const TaskDefinition& task);

// --- Episode fixtures -------------------------------------------------------

/// {task, theta, pool, target, history, targets} with raw-unit values.
nlohmann::ordered_json episode_fixture(const TaskDefinition& task, const Episode& ep, const History& history);

}  // namespace aline
