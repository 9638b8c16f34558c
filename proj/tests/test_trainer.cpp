#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "pdit/error.hpp"
#include "pdit/metrics.hpp"
#include "pdit/trainer.hpp"

namespace pdit::trainer {
namespace {

TrainConfig tiny(model::Arch arch = model::Arch::Pdit) {
  TrainConfig c;
  c.model.arch = arch;
  c.model.hidden_dim = 16;
  c.model.interleave_pairs = 1;
  c.model.mission_embed_dim = 16;
  c.model.baseline_channels = 4;
  c.n_envs = 3;
  c.n_steps = 32;
  c.minibatch = 24;
  c.epochs_per_update = 2;
  c.total_env_steps = 96;
  c.eval.episodes = 8;
  c.eval.every = 1;
  c.checkpoint_every = 1;
  c.seed = 5;
  return c;
}

model::Model make_model(const TrainConfig& c) { return {c.model, model::init_params(c.model, derive_seed(c.seed, 1))}; }

RolloutBuffer rollout(const TrainConfig& c, const model::Model& m, int threads = 1) {
  auto workers = make_workers(c);
  RolloutBuffer b = collect_rollouts(m, workers, c.n_steps, threads);
  compute_advantages(b, c.loss);
  return b;
}

double param_distance(const model::ModelParams& a, const model::ModelParams& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.tensors()[i].size(); ++j) {
      const double x = a.tensors()[i][j] - b.tensors()[i][j];
      d += x * x;
    }
  return std::sqrt(d);
}

TEST(Config, DefaultBufferIs2048) {
  const TrainConfig c;
  EXPECT_EQ(c.buffer_size(), 2048u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Rollouts, ShapeAndRewards) {
  const TrainConfig c = tiny();
  const RolloutBuffer b = rollout(c, make_model(c));
  EXPECT_TRUE(b.full());
  EXPECT_EQ(b.slots.size(), 96u);
  EXPECT_EQ(b.bootstrap_values.size(), 3u);
  for (const Transition& t : b.slots) {
    EXPECT_TRUE(t.reward == 0.0f || t.reward == 1.0f);
    EXPECT_TRUE(std::isfinite(t.logprob));
    EXPECT_LE(t.logprob, 0.0f);
    EXPECT_LE(t.oracle_action, 2);
  }
}

TEST(Rollouts, PrevTokensFollowTransitions) {
  const TrainConfig c = tiny();
  const RolloutBuffer b = rollout(c, make_model(c));
  for (int e = 0; e < b.n_envs; ++e) {
    EXPECT_EQ(b.at(e, 0).prev_action, -1);
    for (int t = 1; t < b.n_steps; ++t) {
      const Transition& prev = b.at(e, t - 1);
      const Transition& cur = b.at(e, t);
      if (prev.done) {
        EXPECT_EQ(cur.prev_action, -1);
        EXPECT_EQ(cur.prev_reward, 0);
      } else {
        EXPECT_EQ(cur.prev_action, prev.action);
        EXPECT_EQ(cur.prev_reward, prev.reward > 0 ? 1 : 0);
      }
    }
  }
}

TEST(Rollouts, RecomputeMatchesStoredLogprobs) {
  for (model::Arch arch : {model::Arch::Pdit, model::Arch::Baseline}) {
    const TrainConfig c = tiny(arch);
    const model::Model m = make_model(c);
    const RolloutBuffer b = rollout(c, m);
    const std::vector<ActionSample> again = recompute(m, b);
    ASSERT_EQ(again.size(), b.slots.size());
    for (std::size_t i = 0; i < again.size(); ++i) {
      EXPECT_NEAR(again[i].logprob, b.slots[i].logprob, 1e-6);
      EXPECT_NEAR(again[i].value, b.slots[i].value, 1e-6);
    }
  }
}

TEST(Rollouts, ThreadCountDoesNotChangeBuffer) {
  const TrainConfig c = tiny();
  const model::Model m = make_model(c);
  const RolloutBuffer a = rollout(c, m, 1);
  const RolloutBuffer b = rollout(c, m, 3);
  ASSERT_EQ(a.slots.size(), b.slots.size());
  for (std::size_t i = 0; i < a.slots.size(); ++i) {
    EXPECT_EQ(a.slots[i].obs, b.slots[i].obs);
    EXPECT_EQ(a.slots[i].action, b.slots[i].action);
    EXPECT_EQ(a.slots[i].logprob, b.slots[i].logprob);
    EXPECT_EQ(a.slots[i].advantage, b.slots[i].advantage);
  }
  EXPECT_EQ(a.episode_rewards, b.episode_rewards);
}

TEST(Rollouts, AdvantagesMatchPerStreamGae) {
  const TrainConfig c = tiny();
  const RolloutBuffer b = rollout(c, make_model(c));
  for (int e = 0; e < b.n_envs; ++e) {
    std::vector<float> r, v;
    std::unique_ptr<bool[]> d(new bool[static_cast<std::size_t>(b.n_steps)]);
    for (int t = 0; t < b.n_steps; ++t) {
      r.push_back(b.at(e, t).reward);
      v.push_back(b.at(e, t).value);
      d[static_cast<std::size_t>(t)] = b.at(e, t).done;
    }
    const losses::Advantages a = losses::gae(r, v, {d.get(), r.size()}, b.bootstrap_values[static_cast<std::size_t>(e)],
                                             c.loss.gamma, c.loss.gae_lambda);
    for (int t = 0; t < b.n_steps; ++t) EXPECT_EQ(b.at(e, t).advantage, a.advantages[static_cast<std::size_t>(t)]);
  }
}

TEST(SampleAction, FollowsSoftmax) {
  const std::vector<float> logits{0.0f, std::log(3.0f), -50.0f};
  SplitMix64 rng(1);
  std::array<int, 3> counts{};
  for (int i = 0; i < 20'000; ++i) ++counts[static_cast<std::size_t>(sample_action(logits, rng))];
  EXPECT_NEAR(counts[0] / 20'000.0, 0.25, 0.015);
  EXPECT_NEAR(counts[1] / 20'000.0, 0.75, 0.015);
  EXPECT_EQ(counts[2], 0);
}

TEST(Workers, EnvironmentVariable) {
  ::unsetenv("PDIT_NUM_WORKERS");
  EXPECT_EQ(worker_count_from_env(), 1);
  ::setenv("PDIT_NUM_WORKERS", "4", 1);
  EXPECT_EQ(worker_count_from_env(), 4);
  ::setenv("PDIT_NUM_WORKERS", "zero", 1);
  EXPECT_THROW(worker_count_from_env(), ConfigError);
  ::setenv("PDIT_NUM_WORKERS", "0", 1);
  EXPECT_THROW(worker_count_from_env(), ConfigError);
  ::unsetenv("PDIT_NUM_WORKERS");
}

TEST(Update, FirstRatioIsOneAndParametersMove) {
  const TrainConfig c = tiny();
  model::Model m = make_model(c);
  const model::ModelParams before = m.params;
  const RolloutBuffer b = rollout(c, m);
  Learner learner = make_learner(m, c);
  const UpdateStats s = update(m, b, c, learner);
  EXPECT_NEAR(s.first_minibatch_ratio, 1.0, 1e-5);
  EXPECT_EQ(s.minibatches, 8u);
  EXPECT_GT(param_distance(before, m.params), 0.0);
  EXPECT_GT(s.grad_norm_thetaP, 0.0);
  EXPECT_GT(s.grad_norm_thetaD, 0.0);
  EXPECT_TRUE(std::isfinite(s.total));
  EXPECT_GT(s.infonce, 0.0);
  EXPECT_GT(s.imitation, 0.0);
}

TEST(Update, ImitationSkippedWithoutSupervision) {
  TrainConfig c = tiny();
  c.ablation.no_supervision = true;
  c = resolve(c);
  model::Model m = make_model(c);
  const RolloutBuffer b = rollout(c, m);
  Learner learner = make_learner(m, c);
  EXPECT_EQ(update(m, b, c, learner).imitation, 0.0);
}

TEST(GradientNorms, PerceptionCouplingAndFrozenControl) {
  TrainConfig c = tiny();
  c.loss.lambda1 = 0.0f;
  c.loss.lambda2 = 0.0f;
  const model::Model m = make_model(c);
  const RolloutBuffer b = rollout(c, m);
  std::vector<std::size_t> idx(24);
  std::iota(idx.begin(), idx.end(), 0);
  const GradientNorms live = gradient_norms(m, b, idx, c, false);
  const GradientNorms frozen = gradient_norms(m, b, idx, c, true);
  EXPECT_GT(live.perception, 0.0);
  EXPECT_GT(live.decision, 0.0);
  EXPECT_EQ(frozen.perception, 0.0);
  EXPECT_GT(frozen.decision, 0.0);
  EXPECT_EQ(live.total_loss, frozen.total_loss);
}

TEST(Pretrain, DisabledIsNoop) {
  TrainConfig c = tiny();
  c.pretrain.enabled = false;
  model::Model m = make_model(c);
  const model::ModelParams before = m.params;
  pretrain_supervised(m, c);
  EXPECT_EQ(m.params, before);
}

TEST(Pretrain, ImitationLossDecreases) {
  TrainConfig c = tiny();
  c.pretrain.enabled = true;
  c.pretrain.steps = 50;
  model::Model m = make_model(c);
  std::vector<double> losses;
  pretrain_supervised(m, c, [&](int, double loss) { losses.push_back(loss); });
  ASSERT_EQ(losses.size(), 50u);
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  EXPECT_LT(tail, head);
}

double random_policy_success(int episodes, std::uint64_t seed_base) {
  SplitMix64 rng(12345);
  int wins = 0;
  for (int i = 0; i < episodes; ++i) {
    env::GoToLocal e;
    e.reset(seed_base + static_cast<std::uint64_t>(i));
    env::StepResult r;
    while (!e.state().done) r = e.step(static_cast<env::Action>(rng.below(env::kActionCount)));
    wins += r.reward > 0 ? 1 : 0;
  }
  return double(wins) / episodes;
}

TEST(Evaluate, RandomPolicyIsWeak) { EXPECT_LT(random_policy_success(500, 0), 0.25); }

TEST(Evaluate, DeterministicAndBinary) {
  const TrainConfig c = tiny();
  const model::Model m = make_model(c);
  const EvalStats a = evaluate(m, 20, 100);
  const EvalStats b = evaluate(m, 20, 100);
  EXPECT_EQ(a.rewards, b.rewards);
  EXPECT_EQ(a.success_rate, b.success_rate);
  EXPECT_DOUBLE_EQ(a.success_rate, a.mean_reward);
  EXPECT_EQ(a.rewards.size(), 20u);
}

TEST(Evaluate, PretrainedPolicyBeatsRandom) {
  TrainConfig c = tiny(model::Arch::Baseline);
  c.pretrain.enabled = true;
  c.pretrain.steps = 300;
  c.pretrain.batch = 128;
  c.pretrain.lr = 3e-3f;
  model::Model m = make_model(c);
  pretrain_supervised(m, c);
  const EvalStats s = evaluate(m, 100, 7'000);
  EXPECT_GT(s.success_rate, random_policy_success(100, 7'000));
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

TEST(Train, WritesRunDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "pdit_trainer_run";
  std::filesystem::remove_all(dir);
  TrainConfig c = tiny();
  c.total_env_steps = 200;
  const TrainResult r = train(c, dir);
  EXPECT_EQ(r.records.size(), 3u);
  EXPECT_EQ(r.env_steps, 288u);
  for (const char* f : {"config.json", "metrics.jsonl", "eval.json", "checkpoints/step_288.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  std::uint64_t last = 0;
  int rows = 0;
  while (std::getline(in, line)) {
    const metrics::MetricsRecord rec = metrics::parse_json_line(line);
    EXPECT_GT(rec.env_step, last);
    EXPECT_TRUE(rec.eval_success_rate.has_value());
    last = rec.env_step;
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  std::filesystem::remove_all(dir);
}

TEST(Train, ReproducibleFromConfigAndSeed) {
  const auto a = std::filesystem::temp_directory_path() / "pdit_trainer_a";
  const auto b = std::filesystem::temp_directory_path() / "pdit_trainer_b";
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  const TrainConfig c = tiny();
  train(c, a);
  ::setenv("PDIT_NUM_WORKERS", "3", 1);
  train(c, b);
  ::unsetenv("PDIT_NUM_WORKERS");
  EXPECT_EQ(read_file(a / "metrics.jsonl"), read_file(b / "metrics.jsonl"));
  EXPECT_EQ(read_file(a / "eval.json"), read_file(b / "eval.json"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Train, AblationParity) {
  TrainConfig full = tiny();
  TrainConfig stacked = full;
  stacked.ablation.no_interleave = true;
  const TrainResult a = train(full);
  const TrainResult b = train(resolve(stacked));
  EXPECT_EQ(b.model.config.arch, model::Arch::Stacked);
  EXPECT_EQ(a.env_steps, b.env_steps);
  EXPECT_EQ(a.parameter_count, b.parameter_count);
}

TEST(Train, NumericBlowUpAborts) {
  const auto dir = std::filesystem::temp_directory_path() / "pdit_trainer_abort";
  std::filesystem::remove_all(dir);
  TrainConfig c = tiny(model::Arch::Baseline);
  c.lr = 1e30f;
  c.max_grad_norm = 0.0f;
  c.total_env_steps = 96 * 4;
  EXPECT_THROW(train(c, dir), NumericError);
  EXPECT_TRUE(std::filesystem::exists(dir / "abort.json"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace pdit::trainer
