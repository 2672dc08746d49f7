#include <gtest/gtest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "aline/eval.hpp"
#include "aline/persistence.hpp"
#include "aline/training.hpp"

#include "httplib.h"

using namespace aline;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("aline_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string(ALINE_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  fs::path write_config(const nlohmann::json& j, const std::string& name = "run.json") const {
    std::ofstream(dir_ / name) << j.dump();
    return dir_ / name;
  }

  static nlohmann::json small_config(const std::string& task) {
    return {{"task", task},
            {"seed", 3},
            {"model", {{"emb_dim", 16}, {"ff_dim", 32}, {"n_layers", 1}, {"n_heads", 2}, {"n_mixture", 3}}},
            {"train", {{"total_epochs", 3}, {"warmup_epochs", 1}, {"batch_size", 2}, {"checkpoint_every", 1}}},
            {"eval", {{"n_runs", 3}, {"pool_size", 30}, {"horizon", 3}, {"spce_contrastive", 50}}}};
  }

  static std::string last_line(const std::string& s) {
    std::string t = s;
    while (!t.empty() && t.back() == '\n') t.pop_back();
    const auto pos = t.rfind('\n');
    return pos == std::string::npos ? t : t.substr(pos + 1);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UnknownSubcommandPrintsUsage) {
  const Result r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  const auto j = nlohmann::json::parse(last_line(r.err));
  EXPECT_EQ(j["error"], "usage");
}

TEST_F(CliTest, InvalidConfigExitsTwoWithJsonError) {
  auto cfg = small_config("gp1d");
  cfg["train"]["discount"] = 2.0;
  const Result r = run("train --config " + write_config(cfg).string() + " --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 2);
  const auto j = nlohmann::json::parse(last_line(r.err));
  EXPECT_EQ(j["error"], "config");
  EXPECT_EQ(r.err.find('\n'), r.err.size() - 1);
}

TEST_F(CliTest, CorruptCheckpointIsARuntimeFailure) {
  std::ofstream(dir_ / "bad.ckpt") << "ALINECKP";
  const Result r = run("eval --checkpoint " + (dir_ / "bad.ckpt").string() + " --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(nlohmann::json::parse(last_line(r.err))["error"], "checkpoint");
}

TEST_F(CliTest, ZeroEpochsWritesTheInitialization) {
  const auto cfg_path = write_config(small_config("location_finding"));
  const Result r = run("train --config " + cfg_path.string() + " --epochs 0 --out " + (dir_ / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint ck = load_checkpoint(dir_ / "o" / "model.ckpt");
  RunConfig cfg = RunConfig::load(cfg_path);
  cfg.train.total_epochs = 0;
  cfg.train.warmup_epochs = 0;
  const auto init = train<float>(make_task(cfg.task), cfg.model, cfg.train);
  EXPECT_EQ(ck.to_params<float>().data, init.params.data);
  ASSERT_TRUE(ck.training.has_value());
  EXPECT_EQ(ck.training->epoch, 0);
  EXPECT_TRUE(CliTest::slurp(dir_ / "o" / "metrics.jsonl").empty());
}

TEST_F(CliTest, TrainWritesMetricsAndResumes) {
  const auto cfg_path = write_config(small_config("psychometric"));
  const fs::path a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --out " + a.string()).code, 0);
  std::ifstream f(a / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(f, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "nll", "pg", "mean_reward", "lr"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["epoch"], lines + 1);
  }
  EXPECT_EQ(lines, 3);
  EXPECT_TRUE(fs::exists(a / "checkpoints" / "epoch_000001.ckpt"));

  // Resuming from epoch 1 reproduces the uninterrupted run.
  const Result r = run("train --config " + cfg_path.string() + " --out " + b.string() + " --checkpoint " +
                       (a / "checkpoints" / "epoch_000001.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(b / "model.ckpt").tensors, load_checkpoint(a / "model.ckpt").tensors);
}

TEST_F(CliTest, EvalWritesReportsAndPlots) {
  const auto cfg_path = write_config(small_config("location_finding"));
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --epochs 0 --out " + (dir_ / "m").string()).code, 0);
  const Result r = run("eval --config " + cfg_path.string() + " --checkpoint " + (dir_ / "m" / "model.ckpt").string() +
                       " --policy aline --policy random --target subset=0 --out " + (dir_ / "e").string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"eval_aline.json", "eval_random.json", "spce.svg", "log_prob_true_theta.svg"})
    EXPECT_TRUE(fs::exists(dir_ / "e" / f)) << f;
  const EvalReport rep = EvalReport::from_json(nlohmann::json::parse(slurp(dir_ / "e" / "eval_random.json")));
  EXPECT_EQ(rep.policy, "random");
  ASSERT_TRUE(rep.spce.has_value());
  EXPECT_EQ(rep.spce->mean.size(), 4u);
  EXPECT_EQ(rep.runs, 3u);

  EXPECT_EQ(run("eval --task gp1d --policy aline --out " + (dir_ / "x").string()).code, 2);
  EXPECT_EQ(run("eval --task gp1d --policy sideways --out " + (dir_ / "x").string()).code, 2);
}

TEST_F(CliTest, SimulateDumpsFixtures) {
  const Result r = run("simulate --task gp1d --seed 7 --steps 3 --pool 10 --episodes 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["pool"].size(), 10u);
  EXPECT_EQ(j[0]["history"].size(), 3u);
  EXPECT_EQ(run("simulate --task gp1d --seed 7 --steps 3 --pool 10 --episodes 2").out, r.out);
  EXPECT_EQ(run("simulate --task gp1d --steps 11 --pool 10").code, 2);
}

TEST_F(CliTest, OracleSuitePasses) {
  const Result r = run("oracle");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST_F(CliTest, ServeAnswersHealthAndSessions) {
  const auto cfg_path = write_config(small_config("psychometric"));
  ASSERT_EQ(run("train --config " + cfg_path.string() + " --epochs 0 --out " + (dir_ / "m").string()).code, 0);
  const int port = 20000 + ::getpid() % 20000;
  const std::string ckpt = (dir_ / "m" / "model.ckpt").string();
  const std::string port_s = std::to_string(port);
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    ::execl(ALINE_CLI, ALINE_CLI, "serve", "--checkpoint", ckpt.c_str(), "--port", port_s.c_str(), nullptr);
    ::_exit(127);
  }
  httplib::Client cli("127.0.0.1", port);
  httplib::Result res;
  for (int i = 0; i < 100 && !(res = cli.Get("/v1/health")); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  res = cli.Post("/v1/sessions", R"({"task":"psychometric","target":"subset=2,3","horizon":30})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  EXPECT_EQ(nlohmann::json::parse(res->body)["pool"].size(), 200u);
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
