#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "aline/persistence.hpp"

using namespace aline;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("aline_test_" + std::to_string(::getpid()) + "_" + std::to_string(n_++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
  static inline int n_ = 0;
};

ModelParams<float> params_for(const std::string& task_name, std::uint64_t seed = 1) {
  ModelConfig c;
  c.emb_dim = 16;
  c.ff_dim = 32;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_mixture = 3;
  Rng rng = make_stream(seed);
  return init_params<float>(model_config_for(make_task(task_name), c), rng);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto p = params_for("psychometric");
  Checkpoint c = Checkpoint::from_params(p, "psychometric");
  c.training = TrainingSnapshot{7, 7, std::vector<double>(p.data.size(), 0.25), std::vector<double>(p.data.size(), 1e-300),
                                42, train_config_json(TrainConfig{})};
  c.training->adam_m[3] = -0.0;
  c.training->adam_v[5] = std::numeric_limits<double>::denorm_min();
  save_checkpoint(dir / "a.ckpt", c);
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  EXPECT_TRUE(back == c);
  for (std::size_t i = 0; i < c.tensors.size(); ++i)
    EXPECT_EQ(std::memcmp(back.tensors[i].values.data(), c.tensors[i].values.data(), 8 * c.tensors[i].values.size()), 0);
  EXPECT_EQ(std::memcmp(back.training->adam_m.data(), c.training->adam_m.data(), 8 * c.training->adam_m.size()), 0);
  save_checkpoint(dir / "b.ckpt", back);
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, LoadedParamsGiveIdenticalOutputs) {
  TempDir dir;
  const auto p = params_for("location_finding", 3);
  save_checkpoint(dir / "m.ckpt", Checkpoint::from_params(p, "location_finding"));
  const auto q = load_checkpoint(dir / "m.ckpt").to_params<float>();
  EXPECT_EQ(q.data, p.data);
  Rng rng = make_stream(9);
  const TaskDefinition task = make_task("location_finding");
  const Episode ep = sample_episode(task, rng, 20);
  const auto et = encode_episode<float>(task, ep);
  const std::vector<std::size_t> rem = {0, 1, 2, 3, 4};
  const auto in = make_inputs(et, Mat<float>(0, 2), Mat<float>(0, 1), rem);
  const auto a = forward(p, in), b = forward(q, in);
  EXPECT_EQ(std::memcmp(a.policy_logits.data(), b.policy_logits.data(), sizeof(float) * a.policy_logits.size()), 0);
  EXPECT_EQ(std::memcmp(a.gmm_means.data(), b.gmm_means.data(), sizeof(float) * a.gmm_means.size()), 0);
}

TEST(Checkpoint, FutureVersionIsRejected) {
  TempDir dir;
  save_checkpoint(dir / "v.ckpt", Checkpoint::from_params(params_for("ces"), "ces"));
  std::string bytes = read_bytes(dir / "v.ckpt");
  bytes[8] = 2;  // format_version field follows the 8-byte magic
  write_bytes(dir / "v.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "v.ckpt"), VersionMismatch);

  Checkpoint c = Checkpoint::from_params(params_for("ces"), "ces");
  c.format_version = 99;
  EXPECT_THROW(c.validate(), VersionMismatch);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  TempDir dir;
  save_checkpoint(dir / "t.ckpt", Checkpoint::from_params(params_for("gp1d"), "gp1d"));
  const std::string bytes = read_bytes(dir / "t.ckpt");
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    write_bytes(dir / "cut.ckpt", bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), TruncatedFile) << cut;
  }
}

TEST(Checkpoint, MissingTensorIsNamed) {
  Checkpoint c = Checkpoint::from_params(params_for("psychometric"), "psychometric");
  std::erase_if(c.tensors, [](const TensorEntry& e) { return e.name == "head.policy.w2"; });
  try {
    c.validate();
    FAIL() << "expected ShapeMismatch";
  } catch (const ShapeMismatch& e) {
    EXPECT_NE(std::string(e.what()).find("head.policy.w2"), std::string::npos);
  }
  TempDir dir;
  save_checkpoint(dir / "m.ckpt", c);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), ShapeMismatch);
}

TEST(Checkpoint, WrongShapeAndDuplicatesAreRejected) {
  Checkpoint c = Checkpoint::from_params(params_for("gp1d"), "gp1d");
  c.tensors[0].shape.push_back(1);
  c.tensors[0].shape[0] += 1;
  EXPECT_THROW(c.validate(), ShapeMismatch);
  c = Checkpoint::from_params(params_for("gp1d"), "gp1d");
  c.tensors.push_back(c.tensors[0]);
  EXPECT_THROW(c.validate(), ShapeMismatch);
}

TEST(Checkpoint, GarbageIsNotACheckpoint) {
  TempDir dir;
  write_bytes(dir / "g.ckpt", "definitely not a checkpoint file");
  EXPECT_THROW(load_checkpoint(dir / "g.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
}

TEST(RunConfigTest, DefaultsFollowTheTask) {
  const RunConfig c = RunConfig::from_json({{"task", "ces"}, {"seed", 5}});
  EXPECT_EQ(c.train.horizon, 10);
  EXPECT_EQ(c.train.pool_size, 2000);
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.model.param_dim, 5);
  EXPECT_EQ(c.eval.horizon, 10);
  const RunConfig back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfigTest, RejectsUnknownKeysAndBadRanges) {
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"tsk", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "nope"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"train", {{"discount", 1.5}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"train", {{"total_epochs", 10}, {"warmup_epochs", 10}}}}),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"model", {{"emb_dim", 30}, {"n_heads", 4}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"model", {{"param_dim", 3}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"eval", {{"n_runs", 1}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"precision", "f16"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "gp1d"}, {"seed", "abc"}}), ConfigError);
}

TEST(RunConfigTest, TargetStrings) {
  const TaskDefinition task = make_task("psychometric");
  EXPECT_EQ(parse_target("all", task).subset().indices, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(parse_target("subset=2,3", task).subset().indices, (std::vector<int>{2, 3}));
  EXPECT_EQ(parse_target("predictive", task).predictive().inputs.size(), 100u);
  EXPECT_THROW(parse_target("subset=3,2", task), ConfigError);
  EXPECT_THROW(parse_target("subset=9", task), ConfigError);
  EXPECT_THROW(parse_target("subset=a", task), ConfigError);
  EXPECT_THROW(parse_target("theta", task), ConfigError);
}

TEST(RunConfigTest, BundledConfigsParse) {
  const fs::path dir = fs::path(ALINE_SOURCE_DIR) / "configs";
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(RunConfig::load(e.path())) << e.path();
    ++n;
  }
  EXPECT_GT(n, 0);
}

TEST(Fixture, EpisodeExportHasAllFields) {
  const TaskDefinition task = make_task("gp1d");
  Rng rng = make_stream(4);
  const Episode ep = sample_episode(task, rng, 5, TargetSpecifier::predictive_at({Design{{0.0}}}));
  History h;
  h.push(ep.pool[2], ep.observe(task, 2, rng));
  const auto j = episode_fixture(task, ep, h);
  EXPECT_EQ(j["pool"].size(), 5u);
  EXPECT_EQ(j["history"].size(), 1u);
  EXPECT_EQ(j["history"][0]["x"], nlohmann::json(ep.pool[2].x));
  EXPECT_EQ(j["targets"]["kind"], "predictive");
  EXPECT_EQ(j["targets"]["latent_values"].size(), 1u);
  EXPECT_EQ(j["theta"].get<Vec>(), ep.theta.values);
}
