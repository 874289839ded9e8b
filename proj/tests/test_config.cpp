#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "uofs/config.hpp"
#include "uofs/coco.hpp"

using namespace uofs;
namespace fs = std::filesystem;

TEST(Config, DefaultsRoundTrip) {
  const json doc = to_json(ExperimentConfig{});
  EXPECT_EQ(to_json(from_json(doc)), doc);
  EXPECT_DOUBLE_EQ(doc["head"]["tau"].get<double>(), 20.0);
  EXPECT_DOUBLE_EQ(doc["train"]["alpha"].get<double>(), 0.5);
}

TEST(Config, OverridesTakePrecedenceOverFile) {
  const fs::path file = fs::temp_directory_path() / "uofs_cfg_test.json";
  std::ofstream(file) << R"({"head": {"tau": 10}, "data": {"k": 5}})";
  const auto cfg = load_config(file, {"head.tau=30", "name=exp1"});
  EXPECT_DOUBLE_EQ(cfg.model.tau, 30.0);
  EXPECT_EQ(cfg.data.k, 5);
  EXPECT_EQ(cfg.name, "exp1");
  fs::remove(file);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(load_config({}, {"head.tauu=3"}), ConfigError);
  EXPECT_THROW(load_config({}, {"head=3"}), ConfigError);
  EXPECT_THROW(load_config({}, {"no_equals_sign"}), ConfigError);
  const fs::path file = fs::temp_directory_path() / "uofs_cfg_unknown.json";
  std::ofstream(file) << R"({"train": {"lr": 0.1, "momentun": 0.9}})";
  try {
    load_config(file, {});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.momentun"), std::string::npos);
  }
  fs::remove(file);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_THROW(load_config({}, {"train.alpha=1.5"}), ConfigError);
  EXPECT_THROW(load_config({}, {"head.kind=\"polar\""}), ConfigError);
}

TEST(Fingerprint, StableAndStageScoped) {
  const json a = resolve_config_json({}, {});
  EXPECT_EQ(fingerprint(a, Stage::kTrainBase), fingerprint(resolve_config_json({}, {}), Stage::kTrainBase));
  // Shot count and split seed do not reach base training.
  const json k5 = resolve_config_json({}, {"data.k=5", "data.split_seed=3"});
  EXPECT_EQ(fingerprint(a, Stage::kTrainBase), fingerprint(k5, Stage::kTrainBase));
  EXPECT_NE(fingerprint(a, Stage::kFinetune), fingerprint(k5, Stage::kFinetune));
  // Evaluation thresholds only reach the evaluate stage.
  const json ev = resolve_config_json({}, {"eval.topk=10"});
  EXPECT_EQ(fingerprint(a, Stage::kFinetune), fingerprint(ev, Stage::kFinetune));
  EXPECT_NE(fingerprint(a, Stage::kEvaluate), fingerprint(ev, Stage::kEvaluate));
  const json lr = resolve_config_json({}, {"train.lr=0.001"});
  EXPECT_NE(fingerprint(a, Stage::kTrainBase), fingerprint(lr, Stage::kTrainBase));
  EXPECT_EQ(fingerprint(a, Stage::kPbbs), fingerprint(lr, Stage::kPbbs));
}

// ---------------------------------------------------------------------------
// Command line

namespace {

struct Outcome {
  int status;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(UOFS_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

class Cli : public ::testing::Test {
 protected:
  fs::path root;
  std::string common;
  void SetUp() override {
    root = fs::temp_directory_path() / ("uofs_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    common = "--runs-dir " + root.string() + " --set data.n_train=12 data.n_test=4";
  }
  void TearDown() override { fs::remove_all(root); }
};

}  // namespace

TEST_F(Cli, EvaluateBeforeTrainingNamesTrainBase) {
  ASSERT_EQ(run_cli("synth-gen " + common).status, 0);
  const auto r = run_cli("evaluate " + common);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("train-base"), std::string::npos) << r.output;
}

TEST_F(Cli, OverrideLandsInSnapshotAndRerunIsNoop) {
  ASSERT_EQ(run_cli("synth-gen " + common + " head.tau=12.5").status, 0);
  const json snap = read_json(root / "default" / "synth" / "config.json");
  EXPECT_DOUBLE_EQ(snap["head"]["tau"].get<double>(), 12.5);
  const json rec = read_json(root / "default" / "synth" / "stage.json");
  EXPECT_EQ(rec["fingerprint"], fingerprint(snap, Stage::kSynth));
  const auto again = run_cli("synth-gen " + common + " head.tau=12.5");
  EXPECT_EQ(again.status, 0);
  EXPECT_NE(again.output.find("up to date"), std::string::npos);
}

TEST_F(Cli, StaleUpstreamIsRefused) {
  ASSERT_EQ(run_cli("synth-gen " + common).status, 0);
  // A different image count changes the synth fingerprint.
  const auto r = run_cli("build-pbbs --runs-dir " + root.string() + " --set data.n_train=13 data.n_test=4");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("synth-gen"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("").status, 2);
  EXPECT_EQ(run_cli("synth-gen " + common + " bogus.key=1").status, 2);
  EXPECT_EQ(run_cli("ablate colour_space " + common).status, 2);
}
