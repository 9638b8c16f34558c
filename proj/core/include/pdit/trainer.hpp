#pragma once

// PPO training loop: rollouts over parallel environments, GAE, clipped
// surrogate plus contrastive and imitation terms, optional supervised warm
// start, periodic greedy evaluation, metrics and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pdit/env.hpp"
#include "pdit/losses.hpp"
#include "pdit/metrics.hpp"
#include "pdit/model.hpp"
#include "pdit/rng.hpp"

namespace pdit::trainer {

struct AblationFlags {
  bool no_clip_align = false;
  bool no_interleave = false;
  bool no_supervision = false;
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct PretrainConfig {
  bool enabled = false;
  int batch = 512;
  float lr = 1e-4f;
  int steps = 100;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct EvalConfig {
  int every = 10;  // updates
  int episodes = 100;
  std::uint64_t seed_base = 1'000'000'000ULL;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TrainConfig {
  model::ModelConfig model;
  env::EnvConfig env;
  losses::LossWeights loss;
  AblationFlags ablation;
  PretrainConfig pretrain;
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::uint64_t total_env_steps = 300'000;
  int n_envs = 8;
  int n_steps = 256;
  int minibatch = 64;
  int epochs_per_update = 4;
  float lr = 3e-4f;
  float max_grad_norm = 0.5f;  // <= 0 disables clipping
  bool normalize_advantages = true;
  bool dedupe_missions = false;
  int checkpoint_every = 50;  // updates; the final update always checkpoints
  int variance_window = 100;  // episodes
  double success_threshold = 0.8;
  bool log_wall_time = false;
  /// Seeds used by the ablation runner; empty means {seed}.
  std::vector<std::uint64_t> ablation_seeds;

  /// Throws ConfigError with a field-level message.
  void validate() const;
  std::size_t buffer_size() const { return static_cast<std::size_t>(n_envs) * static_cast<std::size_t>(n_steps); }
  std::uint64_t update_count() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Applies ablation flags: no_interleave -> stacked arch, no_clip_align ->
/// lambda1 = 0, no_supervision -> lambda2 = 0 and no warm start.
TrainConfig resolve(const TrainConfig& config);

struct Transition {
  env::Observation obs;
  int prev_action = -1;
  int prev_reward = 0;
  int action = 0;
  int oracle_action = 0;
  float logprob = 0.0f;
  float value = 0.0f;
  float reward = 0.0f;
  bool done = false;
  float advantage = 0.0f;
  float ret = 0.0f;
};

/// n_envs x n_steps transitions, env-major.
struct RolloutBuffer {
  int n_envs = 0;
  int n_steps = 0;
  std::vector<Transition> slots;
  std::vector<float> bootstrap_values;  // one per env stream
  std::vector<double> episode_rewards;  // episodes completed during collection
  std::vector<int> episode_lengths;

  Transition& at(int env, int t) { return slots[static_cast<std::size_t>(env * n_steps + t)]; }
  const Transition& at(int env, int t) const { return slots[static_cast<std::size_t>(env * n_steps + t)]; }
  bool full() const { return slots.size() == static_cast<std::size_t>(n_envs * n_steps); }
};

/// One environment stream with its own episode-seed and sampling RNG streams.
class EnvWorker {
 public:
  EnvWorker(const env::EnvConfig& config, std::uint64_t run_seed, int index);

  const env::Observation& observation() const noexcept { return obs_; }
  const env::WorldState& state() const noexcept { return env_.state(); }
  int prev_action() const noexcept { return prev_action_; }
  int prev_reward() const noexcept { return prev_reward_; }
  SplitMix64& sampler() noexcept { return sampler_; }

  /// Steps the env, auto-resetting on done. Returns the step result.
  env::StepResult step(env::Action a);
  int episode_length() const noexcept { return episode_length_; }

 private:
  void start_episode();

  env::GoToLocal env_;
  std::uint64_t seed_stream_;
  std::uint64_t episode_ = 0;
  SplitMix64 sampler_;
  env::Observation obs_;
  int prev_action_ = -1;
  int prev_reward_ = 0;
  int episode_length_ = 0;
};

std::vector<EnvWorker> make_workers(const TrainConfig& config);

/// Worker threads used for rollout collection: PDIT_NUM_WORKERS if set, else 1.
int worker_count_from_env();

struct ActionSample {
  int action = 0;
  float logprob = 0.0f;
  float value = 0.0f;
};

/// Samples from softmax(logits) with one uniform draw (inverse CDF).
int sample_action(std::span<const float> logits, SplitMix64& rng);

/// Collects n_steps transitions from every worker with a read-only model.
/// Each env is processed independently, so the buffer does not depend on the
/// number of threads.
RolloutBuffer collect_rollouts(const model::Model& model, std::vector<EnvWorker>& workers, int n_steps,
                               int threads = 1);

/// Fills advantage/return per env stream.
void compute_advantages(RolloutBuffer& buffer, const losses::LossWeights& w);

/// Per-sample log-probabilities and values of the buffer under `model`.
std::vector<ActionSample> recompute(const model::Model& model, const RolloutBuffer& buffer);

struct UpdateStats {
  double ppo = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double infonce = 0.0;
  double imitation = 0.0;
  double total = 0.0;
  double approx_kl = 0.0;
  double first_minibatch_ratio = 0.0;  // mean importance ratio, epoch 0, minibatch 0
  double grad_norm_thetaP = 0.0;
  double grad_norm_thetaD = 0.0;
  std::size_t minibatches = 0;
};

/// Optimizer and shuffling state that persists across updates.
struct Learner {
  AdamState adam;
  SplitMix64 shuffle{0};
};

Learner make_learner(const model::Model& model, const TrainConfig& config);

/// epochs_per_update passes over shuffled minibatches; one Adam step each.
UpdateStats update(model::Model& model, const RolloutBuffer& buffer, const TrainConfig& config, Learner& learner);

struct GradientNorms {
  double perception = 0.0;
  double decision = 0.0;
  double total_loss = 0.0;
};

/// Gradient norms of the total loss on `indices` of the buffer without an
/// optimizer step. With freeze_perception the encoder/perception parameters
/// are treated as constants.
GradientNorms gradient_norms(const model::Model& model, const RolloutBuffer& buffer, std::span<const std::size_t> indices,
                             const TrainConfig& config, bool freeze_perception = false);

/// Supervised warm start on oracle-labelled states. No-op when disabled.
/// Calls `on_batch(step, imitation_loss)` after every batch when provided.
void pretrain_supervised(model::Model& model, const TrainConfig& config,
                         const std::function<void(int, double)>& on_batch = {});

struct EvalStats {
  double mean_reward = 0.0;
  double std_reward = 0.0;
  double success_rate = 0.0;
  double mean_length = 0.0;
  std::vector<double> rewards;
};

/// Greedy (argmax) rollouts on seeds seed_base .. seed_base + n - 1.
EvalStats evaluate(const model::Model& model, int n_episodes, std::uint64_t seed_base, const env::EnvConfig& env = {});

struct TrainResult {
  std::vector<metrics::MetricsRecord> records;
  std::vector<metrics::EvalPoint> eval_history;
  std::vector<double> episode_rewards;  // every training episode, in order
  std::vector<double> trailing_rewards;  // last variance_window episodes
  std::optional<std::uint64_t> convergence_step;
  std::optional<std::uint64_t> threshold_step;
  std::uint64_t env_steps = 0;
  std::size_t parameter_count = 0;
  EvalStats final_eval;
  model::Model model;
};

/// collect -> gae -> update until total_env_steps. When out_dir is set,
/// writes config.json, metrics.jsonl, checkpoints/step_<N>.ckpt and eval.json.
TrainResult train(const TrainConfig& config, const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const metrics::MetricsRecord&)>& on_update = {});

}  // namespace pdit::trainer
