#include "pdit/losses.hpp"

#include <cmath>
#include <numeric>

#include "pdit/error.hpp"

namespace pdit::losses {

void LossWeights::validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(lambda1 >= 0.0f, "loss.lambda1: must be >= 0");
  require(lambda2 >= 0.0f, "loss.lambda2: must be >= 0");
  require(value_coef >= 0.0f, "loss.value_coef: must be >= 0");
  require(entropy_coef >= 0.0f, "loss.entropy_coef: must be >= 0");
  require(clip_epsilon > 0.0f && clip_epsilon < 1.0f, "loss.clip_epsilon: must lie in (0, 1)");
  require(gamma >= 0.0f && gamma <= 1.0f, "loss.gamma: must lie in [0, 1]");
  require(gae_lambda >= 0.0f && gae_lambda <= 1.0f, "loss.gae_lambda: must lie in [0, 1]");
  require(infonce_tau > 0.0f, "loss.infonce_tau: must be > 0");
}

Advantages gae(std::span<const float> rewards, std::span<const float> values, std::span<const bool> dones,
               float bootstrap_value, float gamma, float lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw InvalidArgument("gae: rewards, values and dones differ in length");
  Advantages out;
  out.advantages.resize(n);
  out.returns.resize(n);
  double next_adv = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    const double adv = delta + double(gamma) * lambda * live * next_adv;
    out.advantages[i] = static_cast<float>(adv);
    out.returns[i] = static_cast<float>(adv + values[i]);
    next_adv = adv;
    next_value = values[i];
  }
  return out;
}

std::vector<float> normalize(std::span<const float> x) {
  if (x.empty()) return {};
  double mu = 0.0;
  for (float v : x) mu += v;
  mu /= double(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>((x[i] - mu) * inv);
  return out;
}

Var ppo_clip_loss(const Var& new_logprobs, std::span<const float> old_logprobs, std::span<const float> advantages,
                  float epsilon, bool normalize_advantages) {
  const std::size_t n = new_logprobs.value().size();
  if (old_logprobs.size() != n || advantages.size() != n)
    throw InvalidArgument("ppo_clip_loss: length mismatch");
  Tape& tape = new_logprobs.tape();
  const Shape shape = new_logprobs.shape();
  const std::vector<float> adv =
      normalize_advantages ? normalize(advantages) : std::vector<float>(advantages.begin(), advantages.end());
  Var old = tape.constant(Tensor(shape, std::vector<float>(old_logprobs.begin(), old_logprobs.end())));
  Var a = tape.constant(Tensor(shape, adv));
  Var ratio = exp(sub(new_logprobs, old));
  Var unclipped = mul(ratio, a);
  Var clipped = mul(clamp(ratio, 1.0f - epsilon, 1.0f + epsilon), a);
  return scale(mean(minimum(unclipped, clipped)), -1.0f);
}

Var value_loss(const Var& values, std::span<const float> targets) {
  if (targets.size() != values.value().size()) throw InvalidArgument("value_loss: length mismatch");
  Var t = values.tape().constant(Tensor(values.shape(), std::vector<float>(targets.begin(), targets.end())));
  return mean(square(sub(values, t)));
}

Var entropy(const Var& logits) {
  if (logits.value().rank() != 2) throw InvalidArgument("entropy expects [B, A] logits");
  const std::size_t batch = logits.shape()[0];
  Var logp = log_softmax(logits, 1);
  return scale(sum(mul(exp(logp), logp)), -1.0f / static_cast<float>(batch));
}

Var action_logprobs(const Var& logits, std::span<const int> actions) { return pick(log_softmax(logits, 1), actions); }

Var infonce_loss(const Var& visual, const Var& text, float tau) {
  if (visual.value().rank() != 2 || visual.shape() != text.shape())
    throw InvalidArgument("infonce_loss expects two [N, d] tensors of equal shape");
  if (!(tau > 0.0f)) throw InvalidArgument("infonce_loss: tau must be positive");
  const std::size_t n = visual.shape()[0];
  Var sim = scale(matmul(l2_normalize(visual), l2_normalize(text), /*trans_b=*/true), 1.0f / tau);
  std::vector<int> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  Var image_to_text = mean(pick(log_softmax(sim, 1), diag));
  Var text_to_image = mean(pick(log_softmax(sim, 0), diag));
  return scale(add(image_to_text, text_to_image), -0.5f);
}

Var imitation_loss(const Var& logits, std::span<const int> oracle_actions) {
  return scale(mean(action_logprobs(logits, oracle_actions)), -1.0f);
}

Var total_loss(const LossTerms& terms, const LossWeights& w) {
  auto check = [](const Var& v, const char* name) {
    if (v.value().size() != 1) throw InvalidArgument(std::string("total_loss: ") + name + " is not scalar");
    if (!std::isfinite(v.value()[0])) throw NumericError(std::string("total_loss: non-finite ") + name);
  };
  check(terms.ppo, "ppo");
  check(terms.value, "value");
  check(terms.entropy, "entropy");
  Var total = add(terms.ppo, sub(scale(terms.value, w.value_coef), scale(terms.entropy, w.entropy_coef)));
  if (terms.infonce) {
    check(*terms.infonce, "infonce");
    total = add(total, scale(*terms.infonce, w.lambda1));
  }
  if (terms.imitation) {
    check(*terms.imitation, "imitation");
    total = add(total, scale(*terms.imitation, w.lambda2));
  }
  return total;
}

}  // namespace pdit::losses
