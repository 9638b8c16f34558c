#include "pdit_cli/gradcheck_suite.hpp"

#include <cmath>
#include <memory>

#include "pdit/env.hpp"
#include "pdit/losses.hpp"
#include "pdit/model.hpp"
#include "pdit/rng.hpp"

namespace pdit::cli {
namespace {

Tensor uniform(Shape shape, SplitMix64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = lo + (hi - lo) * static_cast<float>(rng.uniform());
  return t;
}

/// Uniform in [-1, 1] but at least `margin` away from each point in `avoid`.
Tensor uniform_avoiding(Shape shape, SplitMix64& rng, std::initializer_list<float> avoid, float margin) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) {
    bool ok = false;
    while (!ok) {
      v = -1.0f + 2.0f * static_cast<float>(rng.uniform());
      ok = true;
      for (float a : avoid) ok = ok && std::abs(v - a) > margin;
    }
  }
  return t;
}

/// sum(x * W) for a fixed random W, so every output coordinate matters.
Var project(const Var& x, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return sum(mul(x, x.tape().constant(uniform(x.shape(), rng))));
}

std::vector<float> values_of(const Var& v) { return v.value().vec(); }

std::vector<env::Observation> observations(std::uint64_t seed, std::size_t n) {
  std::vector<env::Observation> obs;
  for (std::size_t i = 0; i < n; ++i) obs.push_back(env::observe(env::generate_instance(derive_seed(seed, i))));
  return obs;
}

GradCase model_case(const std::string& name, model::Arch arch, int pairs, std::uint64_t seed) {
  model::ModelConfig mc;
  mc.arch = arch;
  mc.hidden_dim = 8;
  mc.heads = 2;
  mc.interleave_pairs = pairs;
  mc.mission_embed_dim = 8;
  mc.baseline_channels = 4;
  auto params = std::make_shared<model::ModelParams>(model::init_params(mc, seed));
  auto obs = std::make_shared<std::vector<env::Observation>>(observations(seed, 3));
  const std::vector<int> prev_actions{-1, 2, 6};
  const std::vector<int> prev_rewards{0, 1, 0};
  const std::vector<int> actions{2, 0, 6};
  const std::vector<int> oracle{2, 1, 2};
  const std::vector<float> advantages{0.7f, -1.1f, 1.4f};
  const std::vector<float> returns{0.5f, 1.0f, 0.2f};

  // Old log-probabilities equal the current ones, so every ratio starts at 1,
  // well inside the clip interval.
  std::vector<float> old_logprobs;
  {
    Tape tape;
    const model::BoundParams p(tape, *params, false, false);
    const model::ForwardOutput out = model::forward(p, mc, model::PolicyInput{*obs, prev_actions, prev_rewards});
    old_logprobs = values_of(losses::action_logprobs(out.logits, actions));
  }

  GradCase c;
  c.name = name;
  c.params.assign(params->tensors().begin(), params->tensors().end());
  c.program = [=](Tape&, std::span<const Var> v) {
    const model::BoundParams p(*params, std::vector<Var>(v.begin(), v.end()));
    const model::ForwardOutput out = model::forward(p, mc, model::PolicyInput{*obs, prev_actions, prev_rewards});
    losses::LossTerms terms;
    terms.ppo = losses::ppo_clip_loss(losses::action_logprobs(out.logits, actions), old_logprobs, advantages, 0.2f,
                                      false);
    terms.value = losses::value_loss(out.value, returns);
    terms.entropy = losses::entropy(out.logits);
    terms.infonce = losses::infonce_loss(out.visual_embed, out.text_embed, 0.5f);
    terms.imitation = losses::imitation_loss(out.logits, oracle);
    return losses::total_loss(terms, {});
  };
  return c;
}

}  // namespace

std::vector<GradCase> gradcheck_cases(std::uint64_t seed, bool include_deep) {
  SplitMix64 rng(seed);
  std::vector<GradCase> cases;
  std::uint64_t proj = derive_seed(seed, 99);
  auto add_case = [&](std::string name, std::vector<Tensor> params, auto body) {
    const std::uint64_t s = proj++;
    cases.push_back({std::move(name),
                     [body, s](Tape&, std::span<const Var> v) { return project(body(v), s); },
                     std::move(params)});
  };

  add_case("add", {uniform({3, 4}, rng), uniform({3, 4}, rng)}, [](auto v) { return add(v[0], v[1]); });
  add_case("sub", {uniform({3, 4}, rng), uniform({3, 4}, rng)}, [](auto v) { return sub(v[0], v[1]); });
  add_case("mul", {uniform({3, 4}, rng), uniform({3, 4}, rng)}, [](auto v) { return mul(v[0], v[1]); });
  add_case("scale", {uniform({3, 4}, rng)}, [](auto v) { return scale(v[0], 1.7f); });
  add_case("add_scalar", {uniform({3, 4}, rng)}, [](auto v) { return add_scalar(v[0], 0.3f); });
  add_case("add_bias", {uniform({2, 3, 4}, rng), uniform({4}, rng)}, [](auto v) { return add_bias(v[0], v[1]); });
  add_case("exp", {uniform({3, 4}, rng)}, [](auto v) { return exp(v[0]); });
  add_case("log", {uniform({3, 4}, rng, 0.5f, 2.0f)}, [](auto v) { return log(v[0]); });
  add_case("relu", {uniform_avoiding({3, 4}, rng, {0.0f}, 0.05f)}, [](auto v) { return relu(v[0]); });
  add_case("gelu", {uniform({3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return gelu(v[0]); });
  add_case("square", {uniform({3, 4}, rng)}, [](auto v) { return square(v[0]); });
  add_case("clamp", {uniform_avoiding({4, 5}, rng, {-0.5f, 0.5f}, 0.05f)},
           [](auto v) { return clamp(v[0], -0.5f, 0.5f); });
  {
    Tensor a = uniform({3, 4}, rng);
    Tensor b = uniform({3, 4}, rng);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a[i] - b[i]) < 0.05f) b[i] = a[i] + 0.1f;
    add_case("minimum", {a, b}, [](auto v) { return minimum(v[0], v[1]); });
  }
  add_case("linear", {uniform({2, 3, 4}, rng), uniform({4, 5}, rng), uniform({5}, rng)},
           [](auto v) { return linear(v[0], v[1], v[2]); });
  add_case("linear_nobias", {uniform({3, 4}, rng), uniform({4, 5}, rng)}, [](auto v) { return linear(v[0], v[1]); });
  add_case("matmul", {uniform({3, 4}, rng), uniform({4, 2}, rng)}, [](auto v) { return matmul(v[0], v[1]); });
  add_case("matmul_trans_b", {uniform({3, 4}, rng), uniform({2, 4}, rng)},
           [](auto v) { return matmul(v[0], v[1], true); });
  add_case("bmm", {uniform({2, 3, 4}, rng), uniform({2, 4, 5}, rng)}, [](auto v) { return bmm(v[0], v[1]); });
  add_case("bmm_trans_b", {uniform({2, 3, 4}, rng), uniform({2, 5, 4}, rng)},
           [](auto v) { return bmm(v[0], v[1], true); });
  add_case("softmax_axis0", {uniform({3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return softmax(v[0], 0); });
  add_case("softmax_axis1", {uniform({3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return softmax(v[0], 1); });
  add_case("softmax_rank3", {uniform({2, 3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return softmax(v[0], 2); });
  add_case("log_softmax_axis0", {uniform({3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return log_softmax(v[0], 0); });
  add_case("log_softmax_axis1", {uniform({3, 4}, rng, -2.0f, 2.0f)}, [](auto v) { return log_softmax(v[0], 1); });
  add_case("layer_norm", {uniform({3, 5}, rng), uniform({5}, rng, 0.5f, 1.5f), uniform({5}, rng)},
           [](auto v) { return layer_norm(v[0], v[1], v[2]); });
  add_case("l2_normalize", {uniform({3, 4}, rng)}, [](auto v) { return l2_normalize(v[0]); });
  add_case("embedding", {uniform({5, 3}, rng)}, [](auto v) {
    static const std::vector<int> ids{0, 2, 2, 4};
    return embedding(v[0], ids);
  });
  add_case("reshape", {uniform({2, 6}, rng)}, [](auto v) { return reshape(v[0], {3, 4}); });
  add_case("concat_axis0", {uniform({2, 3}, rng), uniform({1, 3}, rng)}, [](auto v) {
    const std::vector<Var> parts{v[0], v[1]};
    return concat(parts, 0);
  });
  add_case("concat_axis1", {uniform({2, 3, 2}, rng), uniform({2, 1, 2}, rng)}, [](auto v) {
    const std::vector<Var> parts{v[0], v[1]};
    return concat(parts, 1);
  });
  add_case("slice", {uniform({2, 5, 3}, rng)}, [](auto v) { return slice(v[0], 1, 1, 3); });
  add_case("swap_axes_12", {uniform({2, 3, 4, 2}, rng)}, [](auto v) { return swap_axes_12(v[0]); });
  add_case("sum", {uniform({3, 4}, rng)}, [](auto v) { return sum(square(v[0])); });
  add_case("mean", {uniform({3, 4}, rng)}, [](auto v) { return mean(square(v[0])); });
  add_case("sum_axis", {uniform({2, 3, 4}, rng)}, [](auto v) { return sum_axis(v[0], 1); });
  add_case("mean_axis", {uniform({2, 3, 4}, rng)}, [](auto v) { return mean_axis(v[0], 1); });
  add_case("pick", {uniform({3, 4}, rng)}, [](auto v) {
    static const std::vector<int> idx{1, 0, 3};
    return pick(v[0], idx);
  });
  add_case("conv2d", {uniform({2, 4, 4, 3}, rng), uniform({27, 2}, rng), uniform({2}, rng)},
           [](auto v) { return conv2d(v[0], v[1], v[2], 3, 1); });
  add_case("attention", {uniform({3, 4}, rng), uniform({5, 4}, rng), uniform({5, 2}, rng)},
           [](auto v) { return attention(v[0], v[1], v[2]).output; });
  add_case("attention_masked", {uniform({2, 3, 4}, rng), uniform({2, 5, 4}, rng), uniform({2, 5, 2}, rng)},
           [](auto v) {
             static const std::vector<std::vector<bool>> mask{
                 {true, false, true, true, true}, {true, true, true, false, false}, {false, true, true, true, true}};
             return attention(v[0], v[1], v[2], &mask).output;
           });

  // Losses.
  const std::vector<int> actions{0, 3, 6, 2, 5, 1};
  add_case("action_logprobs", {uniform({6, 7}, rng, -2.0f, 2.0f)},
           [actions](auto v) { return losses::action_logprobs(v[0], actions); });
  add_case("entropy", {uniform({6, 7}, rng, -2.0f, 2.0f)}, [](auto v) { return losses::entropy(v[0]); });
  add_case("imitation_loss", {uniform({6, 7}, rng, -2.0f, 2.0f)},
           [actions](auto v) { return losses::imitation_loss(v[0], actions); });
  {
    const std::vector<float> targets{0.1f, -0.4f, 1.0f, 0.0f, 0.6f};
    add_case("value_loss", {uniform({5}, rng)}, [targets](auto v) { return losses::value_loss(v[0], targets); });
  }
  add_case("infonce_loss", {uniform({4, 3}, rng), uniform({4, 3}, rng)},
           [](auto v) { return losses::infonce_loss(v[0], v[1], 0.5f); });
  {
    // Ratios placed inside and on both sides outside the clip interval.
    Tensor logits = uniform({6, 7}, rng, -2.0f, 2.0f);
    std::vector<float> old;
    {
      Tape tape;
      old = values_of(losses::action_logprobs(tape.constant(logits), actions));
    }
    const std::vector<float> ratios{0.5f, 0.95f, 1.05f, 1.5f, 0.7f, 1.1f};
    for (std::size_t i = 0; i < old.size(); ++i) old[i] -= std::log(ratios[i]);
    const std::vector<float> adv{1.0f, -0.5f, 0.8f, -1.2f, -0.3f, 0.6f};
    add_case("ppo_clip_loss", {logits}, [actions, old, adv](auto v) {
      return losses::ppo_clip_loss(losses::action_logprobs(v[0], actions), old, adv, 0.2f, false);
    });
  }

  cases.push_back(model_case("model_pdit", model::Arch::Pdit, 1, seed));
  if (include_deep) cases.push_back(model_case("model_stacked_L2", model::Arch::Stacked, 2, seed));
  cases.push_back(model_case("model_baseline", model::Arch::Baseline, 1, seed));
  return cases;
}

std::vector<GradCaseResult> run_gradcheck(const std::vector<std::uint64_t>& seeds, double tolerance) {
  std::vector<GradCaseResult> results;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::uint64_t seed = seeds[i];
    for (const GradCase& c : gradcheck_cases(seed, i == 0)) {
      GradCaseResult r;
      r.name = c.name;
      r.seed = seed;
      r.report = grad_check(c.program, c.params);
      r.passed = r.report.max_rel_error < tolerance &&
                 double(r.report.kink_crossings) <= kMaxKinkFraction * double(r.report.coordinates);
      results.push_back(std::move(r));
    }
  }
  return results;
}

}  // namespace pdit::cli
