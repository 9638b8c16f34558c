#pragma once

// Training objectives. All tensor-valued losses are recorded on the tape of
// their inputs so that one backward pass reaches every parameter.

#include <optional>
#include <span>
#include <vector>

#include "pdit/tensor.hpp"

namespace pdit::losses {

struct LossWeights {
  float lambda1 = 0.1f;  // contrastive alignment
  float lambda2 = 0.5f;  // imitation supervision
  float value_coef = 0.5f;
  float entropy_coef = 0.004f;
  float clip_epsilon = 0.2f;
  float gamma = 0.99f;
  float gae_lambda = 0.95f;
  float infonce_tau = 0.1f;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct Advantages {
  std::vector<float> advantages;
  std::vector<float> returns;
};

/// Generalized advantage estimation over one environment stream:
///   delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
///   A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
/// with V_T = bootstrap_value. returns = A + V.
Advantages gae(std::span<const float> rewards, std::span<const float> values, std::span<const bool> dones,
               float bootstrap_value, float gamma, float lambda);

/// Zero mean, unit variance (population std + 1e-8).
std::vector<float> normalize(std::span<const float> x);

/// Negated clipped surrogate: -mean(min(r A, clip(r, 1-eps, 1+eps) A)) with
/// r = exp(new - old). Advantages are constants.
Var ppo_clip_loss(const Var& new_logprobs, std::span<const float> old_logprobs, std::span<const float> advantages,
                  float epsilon, bool normalize_advantages = true);

/// mean((value - target)^2)
Var value_loss(const Var& values, std::span<const float> targets);

/// Mean policy entropy of softmax(logits[B, A]).
Var entropy(const Var& logits);

/// log softmax(logits)[b, action[b]] for each row.
Var action_logprobs(const Var& logits, std::span<const int> actions);

/// Symmetric InfoNCE over cosine similarities / tau, matched pairs on the
/// diagonal: 0.5 * (image->text + text->image) cross-entropy.
Var infonce_loss(const Var& visual, const Var& text, float tau);

/// Mean cross-entropy of softmax(logits) against the oracle actions.
Var imitation_loss(const Var& logits, std::span<const int> oracle_actions);

struct LossTerms {
  Var ppo;
  Var value;
  Var entropy;
  std::optional<Var> infonce;
  std::optional<Var> imitation;
};

/// ppo + value_coef * value - entropy_coef * entropy + lambda1 * infonce
/// + lambda2 * imitation. Absent terms contribute nothing.
Var total_loss(const LossTerms& terms, const LossWeights& w);

}  // namespace pdit::losses
