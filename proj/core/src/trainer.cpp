#include "pdit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <thread>

#include "pdit/checkpoint.hpp"
#include "pdit/config.hpp"
#include "pdit/error.hpp"

namespace pdit::trainer {
namespace {

// Stream indices for derive_seed(run seed, stream).
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kPretrainStream = 3;
constexpr std::uint64_t kEpisodeStreamBase = 1'000;
constexpr std::uint64_t kSamplerStreamBase = 2'000;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += double(v) * v;
  return s;
}

struct GroupNorms {
  double perception = 0.0;
  double decision = 0.0;
};

GroupNorms group_norms(const model::ModelParams& params, std::span<const Tensor> grads) {
  GroupNorms n;
  for (std::size_t i = 0; i < grads.size(); ++i)
    (params.group(i) == model::ParamGroup::Perception ? n.perception : n.decision) += squared_norm(grads[i]);
  n.perception = std::sqrt(n.perception);
  n.decision = std::sqrt(n.decision);
  return n;
}

double log_softmax_at(std::span<const float> logits, int index) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, double(v));
  double z = 0.0;
  for (float v : logits) z += std::exp(double(v) - mx);
  return double(logits[static_cast<std::size_t>(index)]) - mx - std::log(z);
}

struct Batch {
  std::vector<env::Observation> obs;
  std::vector<int> prev_actions;
  std::vector<int> prev_rewards;
  std::vector<int> actions;
  std::vector<int> oracle;
  std::vector<float> old_logprobs;
  std::vector<float> advantages;
  std::vector<float> returns;

  model::PolicyInput input() const { return {obs, prev_actions, prev_rewards}; }
};

Batch gather(const RolloutBuffer& buffer, std::span<const std::size_t> indices) {
  Batch b;
  for (std::size_t i : indices) {
    const Transition& tr = buffer.slots.at(i);
    b.obs.push_back(tr.obs);
    b.prev_actions.push_back(tr.prev_action);
    b.prev_rewards.push_back(tr.prev_reward);
    b.actions.push_back(tr.action);
    b.oracle.push_back(tr.oracle_action);
    b.old_logprobs.push_back(tr.logprob);
    b.advantages.push_back(tr.advantage);
    b.returns.push_back(tr.ret);
  }
  return b;
}

/// Rows whose mission differs from every earlier row.
std::vector<int> first_of_each_mission(std::span<const env::Observation> obs) {
  std::vector<int> keep;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    bool seen = false;
    for (int j : keep) seen = seen || obs[static_cast<std::size_t>(j)].mission == obs[i].mission;
    if (!seen) keep.push_back(static_cast<int>(i));
  }
  return keep;
}

std::optional<Var> contrastive_term(const model::ForwardOutput& out, std::span<const env::Observation> obs,
                                    const TrainConfig& config) {
  if (config.loss.lambda1 <= 0.0f) return std::nullopt;
  if (!config.dedupe_missions) return losses::infonce_loss(out.visual_embed, out.text_embed, config.loss.infonce_tau);
  const std::vector<int> keep = first_of_each_mission(obs);
  if (keep.size() < 2) return std::nullopt;
  return losses::infonce_loss(embedding(out.visual_embed, keep), embedding(out.text_embed, keep),
                              config.loss.infonce_tau);
}

struct MinibatchLoss {
  Var total;
  losses::LossTerms terms;
  Var new_logprobs;
};

MinibatchLoss minibatch_loss(const model::BoundParams& p, const model::ModelConfig& mc, const Batch& b,
                             const TrainConfig& config) {
  const model::ForwardOutput out = model::forward(p, mc, b.input());
  MinibatchLoss m;
  m.new_logprobs = losses::action_logprobs(out.logits, b.actions);
  m.terms.ppo = losses::ppo_clip_loss(m.new_logprobs, b.old_logprobs, b.advantages, config.loss.clip_epsilon,
                                      config.normalize_advantages);
  m.terms.value = losses::value_loss(out.value, b.returns);
  m.terms.entropy = losses::entropy(out.logits);
  m.terms.infonce = contrastive_term(out, b.obs, config);
  if (config.loss.lambda2 > 0.0f) m.terms.imitation = losses::imitation_loss(out.logits, b.oracle);
  m.total = losses::total_loss(m.terms, config.loss);
  return m;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

void shuffle(std::vector<std::size_t>& v, SplitMix64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

model::ForwardOutput infer(const model::Model& m, std::span<const env::Observation> obs, std::span<const int> pa,
                           std::span<const int> pr, Tape& tape) {
  const model::BoundParams p(tape, m.params, false, false);
  return model::forward(p, m.config, {obs, pa, pr});
}

/// Walks a fresh instance some oracle steps forward and labels the state.
struct LabelledState {
  env::Observation obs;
  int prev_action = -1;
  int label = 0;
};

LabelledState oracle_sample(std::uint64_t seed, const env::EnvConfig& ec) {
  env::WorldState s = env::generate_instance(seed, ec.family);
  s.max_steps = ec.max_steps;
  SplitMix64 rng(derive_seed(seed, 0));
  const int distance = env::oracle_distance(s).value_or(0);
  const int walk = distance > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(distance))) : 0;
  int prev = -1;
  for (int k = 0; k < walk; ++k) {
    const env::Action a = env::oracle_action(s);
    s = env::apply_motion(s, a);
    prev = static_cast<int>(a);
  }
  return {env::observe(s), prev, static_cast<int>(env::oracle_action(s))};
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  require(env.max_steps > 0, "env.max_steps: must be > 0");
  require(env.family.min_distractors >= 0, "env.min_distractors: must be >= 0");
  require(env.family.max_distractors >= env.family.min_distractors,
          "env.max_distractors: must be >= env.min_distractors");
  require(env.family.max_distractors <= 12, "env.max_distractors: must be <= 12");
  require(env.family.max_oracle_distance >= 0, "env.max_oracle_distance: must be >= 0");
  require(total_env_steps > 0, "total_env_steps: must be > 0");
  require(n_envs > 0, "n_envs: must be > 0");
  require(n_steps > 0, "n_steps: must be > 0");
  require(minibatch > 0, "minibatch: must be > 0");
  require(buffer_size() % static_cast<std::size_t>(minibatch) == 0,
          "minibatch: must divide n_envs * n_steps (" + std::to_string(buffer_size()) + ")");
  require(epochs_per_update > 0, "epochs_per_update: must be > 0");
  require(lr > 0.0f && std::isfinite(lr), "lr: must be > 0");
  require(std::isfinite(max_grad_norm), "max_grad_norm: must be finite");
  require(checkpoint_every > 0, "checkpoint_every: must be > 0");
  require(variance_window >= 2, "variance_window: must be >= 2");
  require(success_threshold > 0.0 && success_threshold <= 1.0, "success_threshold: must lie in (0, 1]");
  require(pretrain.batch > 0, "pretrain.batch: must be > 0");
  require(pretrain.lr > 0.0f, "pretrain.lr: must be > 0");
  require(pretrain.steps >= 0, "pretrain.steps: must be >= 0");
  require(eval.every > 0, "eval.every: must be > 0");
  require(eval.episodes > 0, "eval.episodes: must be > 0");
}

std::uint64_t TrainConfig::update_count() const {
  const std::uint64_t b = buffer_size();
  return (total_env_steps + b - 1) / b;
}

TrainConfig resolve(const TrainConfig& config) {
  TrainConfig c = config;
  if (c.ablation.no_interleave && c.model.arch == model::Arch::Pdit) c.model.arch = model::Arch::Stacked;
  if (c.ablation.no_clip_align) c.loss.lambda1 = 0.0f;
  if (c.ablation.no_supervision) {
    c.loss.lambda2 = 0.0f;
    c.pretrain.enabled = false;
  }
  return c;
}

// --- Environment workers ----------------------------------------------------

EnvWorker::EnvWorker(const env::EnvConfig& config, std::uint64_t run_seed, int index)
    : env_(config),
      seed_stream_(derive_seed(run_seed, kEpisodeStreamBase + static_cast<std::uint64_t>(index))),
      sampler_(derive_seed(run_seed, kSamplerStreamBase + static_cast<std::uint64_t>(index))) {
  start_episode();
}

void EnvWorker::start_episode() {
  obs_ = env_.reset(derive_seed(seed_stream_, episode_++));
  prev_action_ = -1;
  prev_reward_ = 0;
  episode_length_ = 0;
}

env::StepResult EnvWorker::step(env::Action a) {
  env::StepResult r = env_.step(a);
  ++episode_length_;
  if (r.done) {
    start_episode();
  } else {
    obs_ = r.observation;
    prev_action_ = static_cast<int>(a);
    prev_reward_ = r.reward > 0.0f ? 1 : 0;
  }
  return r;
}

std::vector<EnvWorker> make_workers(const TrainConfig& config) {
  std::vector<EnvWorker> workers;
  workers.reserve(static_cast<std::size_t>(config.n_envs));
  for (int i = 0; i < config.n_envs; ++i) workers.emplace_back(config.env, config.seed, i);
  return workers;
}

int worker_count_from_env() {
  const char* raw = std::getenv("PDIT_NUM_WORKERS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("PDIT_NUM_WORKERS: expected an integer in [1, 1024]");
  return static_cast<int>(n);
}

int sample_action(std::span<const float> logits, SplitMix64& rng) {
  if (logits.empty()) throw InvalidArgument("sample_action: empty logits");
  double mx = logits[0];
  for (float v : logits) {
    if (!std::isfinite(v)) throw NumericError("sample_action: non-finite logit");
    mx = std::max(mx, double(v));
  }
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(double(logits[i]) - mx);
  const double u = rng.uniform() * z;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

// --- Rollouts -----------------------------------------------------------------

namespace {

struct StreamResult {
  std::vector<double> episode_rewards;
  std::vector<int> episode_lengths;
};

StreamResult collect_stream(const model::Model& model, EnvWorker& w, RolloutBuffer& buffer, int env_index) {
  StreamResult res;
  double episode_return = 0.0;
  for (int t = 0; t < buffer.n_steps; ++t) {
    Transition& tr = buffer.at(env_index, t);
    tr.obs = w.observation();
    tr.prev_action = w.prev_action();
    tr.prev_reward = w.prev_reward();
    tr.oracle_action = static_cast<int>(env::oracle_action(w.state()));
    {
      Tape tape;
      const model::ForwardOutput out =
          infer(model, std::span(&tr.obs, 1), std::span(&tr.prev_action, 1), std::span(&tr.prev_reward, 1), tape);
      const std::span<const float> logits = out.logits.value().data();
      tr.action = sample_action(logits, w.sampler());
      tr.logprob = static_cast<float>(log_softmax_at(logits, tr.action));
      tr.value = out.value.value()[0];
    }
    const int length_before = w.episode_length();
    const env::StepResult r = w.step(static_cast<env::Action>(tr.action));
    tr.reward = r.reward;
    tr.done = r.done;
    episode_return += r.reward;
    if (r.done) {
      res.episode_rewards.push_back(episode_return);
      res.episode_lengths.push_back(length_before + 1);
      episode_return = 0.0;
    }
  }
  Tape tape;
  const env::Observation obs = w.observation();
  const int pa = w.prev_action(), pr = w.prev_reward();
  buffer.bootstrap_values[static_cast<std::size_t>(env_index)] =
      infer(model, std::span(&obs, 1), std::span(&pa, 1), std::span(&pr, 1), tape).value.value()[0];
  return res;
}

}  // namespace

RolloutBuffer collect_rollouts(const model::Model& model, std::vector<EnvWorker>& workers, int n_steps, int threads) {
  if (n_steps <= 0) throw InvalidArgument("collect_rollouts: n_steps must be > 0");
  RolloutBuffer buffer;
  buffer.n_envs = static_cast<int>(workers.size());
  buffer.n_steps = n_steps;
  buffer.slots.resize(workers.size() * static_cast<std::size_t>(n_steps));
  buffer.bootstrap_values.assign(workers.size(), 0.0f);
  std::vector<StreamResult> results(workers.size());

  const int n_threads = std::clamp(threads, 1, std::max(1, buffer.n_envs));
  if (n_threads == 1) {
    for (int e = 0; e < buffer.n_envs; ++e)
      results[static_cast<std::size_t>(e)] = collect_stream(model, workers[static_cast<std::size_t>(e)], buffer, e);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
    std::vector<std::thread> pool;
    for (int k = 0; k < n_threads; ++k) {
      pool.emplace_back([&, k] {
        try {
          for (int e = k; e < buffer.n_envs; e += n_threads)
            results[static_cast<std::size_t>(e)] =
                collect_stream(model, workers[static_cast<std::size_t>(e)], buffer, e);
        } catch (...) {
          errors[static_cast<std::size_t>(k)] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (const StreamResult& r : results) {
    buffer.episode_rewards.insert(buffer.episode_rewards.end(), r.episode_rewards.begin(), r.episode_rewards.end());
    buffer.episode_lengths.insert(buffer.episode_lengths.end(), r.episode_lengths.begin(), r.episode_lengths.end());
  }
  return buffer;
}

void compute_advantages(RolloutBuffer& buffer, const losses::LossWeights& w) {
  if (!buffer.full()) throw InvalidArgument("compute_advantages: buffer is not full");
  const auto n = static_cast<std::size_t>(buffer.n_steps);
  std::vector<float> rewards(n), values(n);
  const auto dones = std::make_unique<bool[]>(n);
  for (int e = 0; e < buffer.n_envs; ++e) {
    for (std::size_t t = 0; t < n; ++t) {
      const Transition& tr = buffer.at(e, static_cast<int>(t));
      rewards[t] = tr.reward;
      values[t] = tr.value;
      dones[t] = tr.done;
    }
    const losses::Advantages a = losses::gae(rewards, values, std::span<const bool>(dones.get(), n),
                                             buffer.bootstrap_values.at(static_cast<std::size_t>(e)), w.gamma,
                                             w.gae_lambda);
    for (std::size_t t = 0; t < n; ++t) {
      Transition& tr = buffer.at(e, static_cast<int>(t));
      tr.advantage = a.advantages[t];
      tr.ret = a.returns[t];
    }
  }
}

std::vector<ActionSample> recompute(const model::Model& model, const RolloutBuffer& buffer) {
  std::vector<ActionSample> out;
  out.reserve(buffer.slots.size());
  for (const Transition& tr : buffer.slots) {
    Tape tape;
    const model::ForwardOutput f =
        infer(model, std::span(&tr.obs, 1), std::span(&tr.prev_action, 1), std::span(&tr.prev_reward, 1), tape);
    out.push_back({tr.action, static_cast<float>(log_softmax_at(f.logits.value().data(), tr.action)),
                   f.value.value()[0]});
  }
  return out;
}

// --- Optimisation ---------------------------------------------------------------

Learner make_learner(const model::Model& model, const TrainConfig& config) {
  AdamHyper hyper;
  hyper.lr = config.lr;
  return {AdamState(hyper, model.params.tensors()), SplitMix64(derive_seed(config.seed, kShuffleStream))};
}

UpdateStats update(model::Model& model, const RolloutBuffer& buffer, const TrainConfig& config, Learner& learner) {
  if (!buffer.full()) throw InvalidArgument("update: buffer is not full");
  const auto mb = static_cast<std::size_t>(config.minibatch);
  if (buffer.slots.size() % mb != 0) throw InvalidArgument("update: minibatch does not divide the buffer");
  UpdateStats stats;
  std::vector<std::size_t> order = iota(buffer.slots.size());
  for (int epoch = 0; epoch < config.epochs_per_update; ++epoch) {
    shuffle(order, learner.shuffle);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const Batch b = gather(buffer, std::span(order).subspan(start, mb));
      Tape tape;
      const model::BoundParams p(tape, model.params);
      const MinibatchLoss m = minibatch_loss(p, model.config, b, config);
      backward(m.total);
      std::vector<Tensor> grads = p.grads();

      const GroupNorms norms = group_norms(model.params, grads);
      const double norm = std::hypot(norms.perception, norms.decision);
      if (!std::isfinite(norm)) throw NumericError("update: non-finite gradient norm");
      if (config.max_grad_norm > 0.0f && norm > config.max_grad_norm) {
        const auto s = static_cast<float>(config.max_grad_norm / (norm + 1e-6));
        for (Tensor& g : grads)
          for (float& v : g.data()) v *= s;
      }

      const std::span<const float> new_lp = m.new_logprobs.value().data();
      double kl = 0.0, ratio = 0.0;
      for (std::size_t i = 0; i < mb; ++i) {
        const double d = double(b.old_logprobs[i]) - new_lp[i];
        kl += d;
        ratio += std::exp(-d);
      }
      if (stats.minibatches == 0) stats.first_minibatch_ratio = ratio / double(mb);
      stats.approx_kl += kl / double(mb);
      stats.ppo += m.terms.ppo.value().item();
      stats.value += m.terms.value.value().item();
      stats.entropy += m.terms.entropy.value().item();
      if (m.terms.infonce) stats.infonce += m.terms.infonce->value().item();
      if (m.terms.imitation) stats.imitation += m.terms.imitation->value().item();
      stats.total += m.total.value().item();
      stats.grad_norm_thetaP += norms.perception;
      stats.grad_norm_thetaD += norms.decision;
      ++stats.minibatches;

      adam_step(model.params.tensors(), grads, learner.adam);
    }
  }
  const double n = double(stats.minibatches);
  for (double* f : {&stats.ppo, &stats.value, &stats.entropy, &stats.infonce, &stats.imitation, &stats.total,
                    &stats.approx_kl, &stats.grad_norm_thetaP, &stats.grad_norm_thetaD})
    *f /= n;
  return stats;
}

GradientNorms gradient_norms(const model::Model& model, const RolloutBuffer& buffer,
                             std::span<const std::size_t> indices, const TrainConfig& config,
                             bool freeze_perception) {
  if (indices.empty()) throw InvalidArgument("gradient_norms: empty index set");
  const Batch b = gather(buffer, indices);
  Tape tape;
  const model::BoundParams p(tape, model.params, freeze_perception);
  const MinibatchLoss m = minibatch_loss(p, model.config, b, config);
  backward(m.total);
  const GroupNorms n = group_norms(model.params, p.grads());
  return {n.perception, n.decision, m.total.value().item()};
}

void pretrain_supervised(model::Model& model, const TrainConfig& config,
                         const std::function<void(int, double)>& on_batch) {
  if (!config.pretrain.enabled || config.pretrain.steps == 0) return;
  AdamHyper hyper;
  hyper.lr = config.pretrain.lr;
  AdamState adam(hyper, model.params.tensors());
  const std::uint64_t stream = derive_seed(config.seed, kPretrainStream);
  const auto batch = static_cast<std::size_t>(config.pretrain.batch);
  std::uint64_t drawn = 0;
  for (int step = 0; step < config.pretrain.steps; ++step) {
    Batch b;
    for (std::size_t i = 0; i < batch; ++i) {
      const LabelledState s = oracle_sample(derive_seed(stream, drawn++), config.env);
      b.obs.push_back(s.obs);
      b.prev_actions.push_back(s.prev_action);
      b.prev_rewards.push_back(0);
      b.oracle.push_back(s.label);
    }
    Tape tape;
    const model::BoundParams p(tape, model.params);
    const model::ForwardOutput out = model::forward(p, model.config, b.input());
    const Var imitation = losses::imitation_loss(out.logits, b.oracle);
    Var loss = imitation;
    if (const std::optional<Var> nce = contrastive_term(out, b.obs, config))
      loss = add(loss, scale(*nce, config.loss.lambda1));
    backward(loss);
    std::vector<Tensor> grads = p.grads();
    const GroupNorms norms = group_norms(model.params, grads);
    const double norm = std::hypot(norms.perception, norms.decision);
    if (config.max_grad_norm > 0.0f && norm > config.max_grad_norm) {
      const auto s = static_cast<float>(config.max_grad_norm / (norm + 1e-6));
      for (Tensor& g : grads)
        for (float& v : g.data()) v *= s;
    }
    adam_step(model.params.tensors(), grads, adam);
    if (on_batch) on_batch(step, imitation.value().item());
  }
}

// --- Evaluation ---------------------------------------------------------------

EvalStats evaluate(const model::Model& model, int n_episodes, std::uint64_t seed_base, const env::EnvConfig& ec) {
  if (n_episodes <= 0) throw InvalidArgument("evaluate: n_episodes must be > 0");
  constexpr std::size_t kChunk = 64;
  EvalStats stats;
  stats.rewards.assign(static_cast<std::size_t>(n_episodes), 0.0);
  std::vector<int> lengths(static_cast<std::size_t>(n_episodes), 0);
  for (std::size_t begin = 0; begin < stats.rewards.size(); begin += kChunk) {
    const std::size_t end = std::min(stats.rewards.size(), begin + kChunk);
    std::vector<env::GoToLocal> envs;
    std::vector<env::Observation> obs;
    std::vector<int> prev_a, prev_r;
    std::vector<std::size_t> live;
    for (std::size_t i = begin; i < end; ++i) {
      envs.emplace_back(ec);
      obs.push_back(envs.back().reset(seed_base + i));
      prev_a.push_back(-1);
      prev_r.push_back(0);
      live.push_back(i - begin);
    }
    while (!live.empty()) {
      std::vector<env::Observation> o;
      std::vector<int> pa, pr;
      for (std::size_t k : live) {
        o.push_back(obs[k]);
        pa.push_back(prev_a[k]);
        pr.push_back(prev_r[k]);
      }
      Tape tape;
      const model::ForwardOutput f = infer(model, o, pa, pr, tape);
      const Tensor& logits = f.logits.value();
      const std::size_t n_act = logits.dim(1);
      std::vector<std::size_t> still;
      for (std::size_t j = 0; j < live.size(); ++j) {
        const float* row = logits.ptr() + j * n_act;
        const auto a = static_cast<int>(std::max_element(row, row + n_act) - row);
        const std::size_t k = live[j];
        const env::StepResult r = envs[k].step(static_cast<env::Action>(a));
        stats.rewards[begin + k] += r.reward;
        ++lengths[begin + k];
        if (r.done) continue;
        obs[k] = r.observation;
        prev_a[k] = a;
        prev_r[k] = r.reward > 0.0f ? 1 : 0;
        still.push_back(k);
      }
      live = std::move(still);
    }
  }
  stats.mean_reward = metrics::mean(stats.rewards);
  stats.std_reward = std::sqrt(metrics::population_variance(stats.rewards));
  double success = 0.0, length = 0.0;
  for (std::size_t i = 0; i < stats.rewards.size(); ++i) {
    success += stats.rewards[i] > 0.0 ? 1.0 : 0.0;
    length += lengths[i];
  }
  stats.success_rate = success / double(n_episodes);
  stats.mean_length = length / double(n_episodes);
  return stats;
}

// --- Training loop --------------------------------------------------------------

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

nlohmann::ordered_json eval_json(const TrainResult& r, const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["env_steps"] = r.env_steps;
  j["parameter_count"] = r.parameter_count;
  j["final_eval"] = {{"episodes", c.eval.episodes},
                     {"mean_reward", r.final_eval.mean_reward},
                     {"std_reward", r.final_eval.std_reward},
                     {"success_rate", r.final_eval.success_rate},
                     {"mean_length", r.final_eval.mean_length}};
  j["convergence_step"] = r.convergence_step ? nlohmann::ordered_json(*r.convergence_step) : nlohmann::ordered_json(nullptr);
  j["threshold_step"] = r.threshold_step ? nlohmann::ordered_json(*r.threshold_step) : nlohmann::ordered_json(nullptr);
  j["success_threshold"] = c.success_threshold;
  j["reward_variance"] = {{"series", "training episode rewards"},
                          {"window", c.variance_window},
                          {"estimator", "population"},
                          {"value", metrics::population_variance(r.trailing_rewards)}};
  nlohmann::ordered_json history = nlohmann::ordered_json::array();
  for (const metrics::EvalPoint& e : r.eval_history)
    history.push_back({{"env_step", e.env_step}, {"success_rate", e.success_rate}});
  j["eval_history"] = std::move(history);
  return j;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const metrics::MetricsRecord&)>& on_update) {
  const TrainConfig c = resolve(config);
  c.validate();
  const std::string config_text = config::to_json(c);
  const std::string config_hash = config::hash_hex(config::fnv1a64(config_text));
  const int threads = worker_count_from_env();

  TrainResult result;
  result.model = {c.model, model::init_params(c.model, derive_seed(c.seed, kInitStream))};
  result.parameter_count = result.model.params.parameter_count();

  std::optional<metrics::MetricsWriter> writer;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir / "checkpoints");
    write_text(*out_dir / "config.json", config_text);
    writer.emplace((*out_dir / "metrics.jsonl").string());
  }

  const auto started = std::chrono::steady_clock::now();
  std::uint64_t update_index = 0;
  try {
    pretrain_supervised(result.model, c);
    std::vector<EnvWorker> workers = make_workers(c);
    Learner learner = make_learner(result.model, c);
    const std::uint64_t updates = c.update_count();
    for (update_index = 0; update_index < updates; ++update_index) {
      RolloutBuffer buffer = collect_rollouts(result.model, workers, c.n_steps, threads);
      compute_advantages(buffer, c.loss);
      const UpdateStats s = update(result.model, buffer, c, learner);
      result.env_steps += c.buffer_size();
      result.episode_rewards.insert(result.episode_rewards.end(), buffer.episode_rewards.begin(),
                                    buffer.episode_rewards.end());

      metrics::MetricsRecord rec;
      rec.env_step = result.env_steps;
      rec.update_index = update_index;
      if (!buffer.episode_rewards.empty()) {
        rec.mean_reward = metrics::mean(buffer.episode_rewards);
        double wins = 0.0;
        for (double r : buffer.episode_rewards) wins += r > 0.0 ? 1.0 : 0.0;
        rec.success_rate = wins / double(buffer.episode_rewards.size());
      }
      const std::size_t window = std::min(result.episode_rewards.size(), static_cast<std::size_t>(c.variance_window));
      rec.reward_variance =
          metrics::population_variance(std::span(result.episode_rewards).last(window));
      rec.loss_ppo = s.ppo;
      rec.loss_value = s.value;
      rec.loss_entropy = s.entropy;
      rec.loss_infonce = s.infonce;
      rec.loss_imitation = s.imitation;
      rec.loss_total = s.total;
      rec.approx_kl = s.approx_kl;
      rec.grad_norm_thetaP = s.grad_norm_thetaP;
      rec.grad_norm_thetaD = s.grad_norm_thetaD;
      if (c.log_wall_time)
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

      const bool last = update_index + 1 == updates;
      if ((update_index + 1) % static_cast<std::uint64_t>(c.eval.every) == 0 || last) {
        result.final_eval = evaluate(result.model, c.eval.episodes, c.eval.seed_base, c.env);
        rec.eval_success_rate = result.final_eval.success_rate;
        rec.eval_mean_reward = result.final_eval.mean_reward;
        result.eval_history.push_back({result.env_steps, result.final_eval.success_rate});
      }
      if (writer) {
        writer->append(rec);
        if ((update_index + 1) % static_cast<std::uint64_t>(c.checkpoint_every) == 0 || last)
          checkpoint::save(*out_dir / "checkpoints" / ("step_" + std::to_string(result.env_steps) + ".ckpt"),
                           {result.model, c.env, config_hash});
      }
      result.records.push_back(rec);
      if (on_update) on_update(rec);
    }
  } catch (const NumericError& e) {
    if (out_dir) {
      nlohmann::ordered_json dump{{"error", e.what()}, {"update_index", update_index}, {"env_step", result.env_steps}};
      write_text(*out_dir / "abort.json", dump.dump(2) + "\n");
      checkpoint::save(*out_dir / "abort_state.ckpt", {result.model, c.env, config_hash});
    }
    throw;
  }

  const std::size_t window = std::min(result.episode_rewards.size(), static_cast<std::size_t>(c.variance_window));
  result.trailing_rewards.assign(result.episode_rewards.end() - static_cast<std::ptrdiff_t>(window),
                                 result.episode_rewards.end());
  result.convergence_step = metrics::convergence_step(result.eval_history);
  result.threshold_step = metrics::threshold_step(result.eval_history, c.success_threshold);
  if (out_dir) write_text(*out_dir / "eval.json", eval_json(result, c).dump(2) + "\n");
  return result;
}

}  // namespace pdit::trainer
