#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pdit/env.hpp"
#include "pdit_cli/commands.hpp"

namespace pdit::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result lab(std::vector<std::string> args) {
  args.insert(args.begin(), "pdit-lab");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("pdit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = dir_ / "tiny.json";
    std::ofstream(config_) << R"({
      "total_env_steps": 500, "n_envs": 2, "n_steps": 128, "minibatch": 64, "epochs_per_update": 1,
      "model": {"hidden_dim": 16, "interleave_pairs": 1, "mission_embed_dim": 16},
      "eval": {"every": 1, "episodes": 4}
    })";
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  fs::path config_;
};

TEST_F(CliTest, MissingConfigExitsTwo) {
  const Result r = lab({"train", "--config", (dir_ / "nope.json").string(), "--out", (dir_ / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, InvalidConfigExitsTwoWithField) {
  std::ofstream(dir_ / "bad.json") << R"({"loss": {"clip_epsilon": 2.0}})";
  const Result r = lab({"train", "--config", (dir_ / "bad.json").string(), "--out", (dir_ / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("clip_epsilon"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(lab({}).code, 2);
  EXPECT_EQ(lab({"fly"}).code, 2);
  EXPECT_EQ(lab({"train", "--seed", "abc"}).code, 2);
  EXPECT_EQ(lab({"train", "--config", config_.string(), "--arch", "lstm", "--out", (dir_ / "x").string()}).code, 2);
  EXPECT_EQ(lab({"train", "--config", config_.string()}).code, 2);
}

TEST_F(CliTest, TinyRunWritesMetricsAndCheckpoint) {
  const Result r = lab({"train", "--config", config_.string(), "--out", (dir_ / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream metrics(dir_ / "run" / "metrics.jsonl");
  int rows = 0;
  for (std::string line; std::getline(metrics, line);) ++rows;
  EXPECT_GE(rows, 1);
  int checkpoints = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "run" / "checkpoints")) checkpoints += e.path().extension() == ".ckpt";
  EXPECT_EQ(checkpoints, 1);
  const auto echoed = nlohmann::json::parse(read_file(dir_ / "run" / "config.json"));
  EXPECT_EQ(echoed["total_env_steps"], 500);
  EXPECT_EQ(echoed["model"]["mission_embed_dim"], 16);
  EXPECT_TRUE(echoed.contains("loss"));
}

TEST_F(CliTest, SeedSevenTwiceIsByteIdentical) {
  ASSERT_EQ(lab({"train", "--config", config_.string(), "--seed", "7", "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(lab({"train", "--config", config_.string(), "--seed", "7", "--out", (dir_ / "b").string()}).code, 0);
  const std::string a = read_file(dir_ / "a" / "metrics.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, read_file(dir_ / "b" / "metrics.jsonl"));
  EXPECT_EQ(nlohmann::json::parse(read_file(dir_ / "a" / "config.json"))["seed"], 7);
}

TEST_F(CliTest, EvalAndCorruptCheckpoint) {
  ASSERT_EQ(lab({"train", "--config", config_.string(), "--out", (dir_ / "run").string()}).code, 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(dir_ / "run" / "checkpoints")) ckpt = e.path();
  const Result ok = lab({"eval", "--checkpoint", ckpt.string(), "--episodes", "5", "--seed", "3"});
  ASSERT_EQ(ok.code, 0) << ok.err;
  const auto stats = nlohmann::json::parse(ok.out);
  EXPECT_EQ(stats["episodes"], 5);
  EXPECT_EQ(stats["success_rate"], stats["mean_reward"]);

  const std::string bytes = read_file(ckpt);
  std::ofstream(dir_ / "truncated.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 100);
  EXPECT_EQ(lab({"eval", "--checkpoint", (dir_ / "truncated.ckpt").string()}).code, 4);
  std::ofstream(dir_ / "garbage.ckpt", std::ios::binary) << "not a checkpoint";
  EXPECT_EQ(lab({"attn-dump", "--checkpoint", (dir_ / "garbage.ckpt").string()}).code, 4);
  EXPECT_EQ(lab({"eval", "--checkpoint", (dir_ / "missing.ckpt").string()}).code, 4);
}

TEST_F(CliTest, AttnDumpRows) {
  ASSERT_EQ(lab({"train", "--config", config_.string(), "--out", (dir_ / "run").string()}).code, 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(dir_ / "run" / "checkpoints")) ckpt = e.path();
  const Result r = lab({"attn-dump", "--checkpoint", ckpt.string(), "--seed", "4", "--out", (dir_ / "attn.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_file(dir_ / "attn.json"));
  EXPECT_EQ(j["shape"], nlohmann::json({5, 49}));
  ASSERT_FALSE(j["steps"].empty());
  for (const auto& step : j["steps"]) {
    ASSERT_EQ(step["alignment"].size(), 5u);
    for (const auto& row : step["alignment"]) {
      ASSERT_EQ(row.size(), 49u);
      for (const auto& v : row) EXPECT_GE(v.get<double>(), 0.0);
    }
  }
}

TEST_F(CliTest, AttnDumpRejectsBaseline) {
  ASSERT_EQ(lab({"train", "--config", config_.string(), "--arch", "baseline", "--out", (dir_ / "run").string()}).code, 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(dir_ / "run" / "checkpoints")) ckpt = e.path();
  EXPECT_EQ(lab({"attn-dump", "--checkpoint", ckpt.string()}).code, 2);
}

TEST_F(CliTest, ReplayRendersAndVerifies) {
  const std::vector<env::Action> script{env::Action::Left, env::Action::Forward, env::Action::Forward};
  {
    std::ofstream trace(dir_ / "trace.jsonl");
    for (const env::TraceRow& row : env::run_script(11, script)) trace << env::trace_to_json(row) << "\n";
  }
  const Result r = lab({"replay", (dir_ / "trace.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("t=1 action=left"), std::string::npos);
  EXPECT_NE(r.out.find("####"), std::string::npos);

  std::string text = read_file(dir_ / "trace.jsonl");
  text.replace(text.find("\"action\":"), 10, "\"action\":5");
  std::ofstream(dir_ / "tampered.jsonl") << text;
  EXPECT_EQ(lab({"replay", "--trace", (dir_ / "tampered.jsonl").string()}).code, 4);
  std::ofstream(dir_ / "junk.jsonl") << "{oops\n";
  EXPECT_EQ(lab({"replay", (dir_ / "junk.jsonl").string()}).code, 4);
}

TEST_F(CliTest, AblateReportsFourVariantsWithEqualBudgets) {
  const Result r = lab({"ablate", "--config", config_.string(), "--out", (dir_ / "abl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(read_file(dir_ / "abl" / "ablation_report.json"));
  ASSERT_EQ(report["variants"].size(), 4u);
  std::vector<std::string> names;
  for (const auto& v : report["variants"]) names.push_back(v["name"]);
  EXPECT_EQ(names, (std::vector<std::string>{"full", "no_clip_align", "no_interleave", "no_supervision"}));
  EXPECT_TRUE(report["findings"]["equal_env_step_budgets"].get<bool>());
  const auto& runs = report["variants"];
  EXPECT_EQ(runs[0]["runs"][0]["parameter_count"], runs[2]["runs"][0]["parameter_count"]);
}

TEST(AblationReport, FindingsFromSyntheticRuns) {
  auto run_with = [](std::uint64_t seed, std::vector<double> rewards, std::optional<std::uint64_t> threshold) {
    VariantRun r;
    r.seed = seed;
    r.env_steps = 1000;
    r.trailing_rewards = std::move(rewards);
    r.threshold_step = threshold;
    return r;
  };
  const std::vector<double> calm{0, 1, 1, 1}, wild{0, 1, 0, 1};
  std::vector<std::pair<std::string, std::vector<VariantRun>>> runs{
      {"full", {run_with(1, calm, 100), run_with(2, calm, 200), run_with(3, calm, 300)}},
      {"no_clip_align", {run_with(1, calm, 200), run_with(2, calm, std::nullopt), run_with(3, calm, 100)}},
      {"no_interleave", {run_with(1, wild, 100), run_with(2, wild, 100), run_with(3, calm, 100)}},
      {"no_supervision", {run_with(1, calm, 100), run_with(2, calm, 100), run_with(3, calm, 100)}}};
  const auto j = nlohmann::json::parse(ablation_report(runs, 0.8));
  const auto& f = j["findings"];
  EXPECT_NEAR(f["median_stability_ratio_stacked_vs_pdit"].get<double>(), 0.25 / 0.1875, 1e-12);
  EXPECT_EQ(f["seeds_with_stacked_variance_above_pdit"], 2);
  EXPECT_TRUE(f["stacked_variance_above_pdit_in_majority"].get<bool>());
  EXPECT_TRUE(f["stability_ratio_above_one"].get<bool>());
  EXPECT_EQ(f["median_threshold_step_with_alignment"], 200.0);
  EXPECT_EQ(f["median_threshold_step_without_alignment"], 200.0);
  EXPECT_TRUE(f["alignment_not_slower"].get<bool>());
  EXPECT_TRUE(f["equal_env_step_budgets"].get<bool>());
}

}  // namespace
}  // namespace pdit::cli
