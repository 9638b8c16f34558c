#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pdit/env.hpp"
#include "pdit/error.hpp"
#include "pdit/losses.hpp"
#include "pdit/model.hpp"
#include "pdit/rng.hpp"

namespace pdit::model {
namespace {

std::vector<env::Observation> observations(std::size_t n, std::uint64_t seed = 0) {
  std::vector<env::Observation> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(env::observe(env::generate_instance(derive_seed(seed, i))));
  return out;
}

ModelConfig small(Arch arch, int pairs = 1) {
  ModelConfig c;
  c.arch = arch;
  c.hidden_dim = 16;
  c.heads = 2;
  c.interleave_pairs = pairs;
  c.mission_embed_dim = 16;
  return c;
}

struct Outputs {
  Tensor logits;
  Tensor value;
  std::vector<AttentionRecord> attention;
};

Outputs run(const ModelConfig& c, const ModelParams& params, std::span<const env::Observation> obs,
        bool record_attention = false) {
  const std::vector<int> prev_actions(obs.size(), -1), prev_rewards(obs.size(), 0);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  ForwardOutput out = forward(p, c, PolicyInput{obs, prev_actions, prev_rewards}, ForwardOptions{record_attention});
  return {out.logits.value(), out.value.value(), std::move(out.attention)};
}

TEST(Encoders, ShapesAtDefaults) {
  const ModelConfig c;
  const ModelParams params = init_params(c, 1);
  const auto obs = observations(1);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  EXPECT_EQ(encode_observation(p, c, obs).shape(), (Shape{1, 49, 64}));
  EXPECT_EQ(encode_mission_tokens(p, c, obs).shape(), (Shape{1, 5, 64}));
}

TEST(Encoders, ObservationSensitiveToOneCell) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 2);
  auto obs = observations(1);
  std::vector<env::Observation> changed = obs;
  // Put a grey box in the far left corner of the view.
  changed[0].view[0] = static_cast<std::uint8_t>(env::view_type_id(env::ObjectType::Box));
  changed[0].view[1] = static_cast<std::uint8_t>(env::view_color_id(env::Color::Grey));
  ASSERT_NE(obs[0].view, changed[0].view);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  const Tensor a = encode_observation(p, c, obs).value();
  const Tensor b = encode_observation(p, c, changed).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a[i] - b[i])));
  EXPECT_GT(diff, 1e-6);
}

TEST(Encoders, ObservationIdOutOfRangeThrows) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 2);
  auto obs = observations(1);
  obs[0].view[4 * 3] = env::kViewTypeIds;
  Tape tape;
  const BoundParams p(tape, params, false, false);
  EXPECT_THROW(encode_observation(p, c, obs), InvalidArgument);
}

TEST(Encoders, MissionPositionsMatter) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 3);
  auto obs = observations(1);
  std::vector<env::Observation> permuted = obs;
  std::swap(permuted[0].mission[3], permuted[0].mission[4]);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  EXPECT_NE(encode_mission_tokens(p, c, obs).value(), encode_mission_tokens(p, c, permuted).value());
  EXPECT_EQ(encode_mission_tokens(p, c, obs).value(), encode_mission_tokens(p, c, obs).value());
}

TEST(Encoders, MissionIdOutOfRangeThrows) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 3);
  auto obs = observations(1);
  obs[0].mission[2] = env::kVocabSize;
  Tape tape;
  const BoundParams p(tape, params, false, false);
  EXPECT_THROW(encode_mission_tokens(p, c, obs), InvalidArgument);
}

TEST(Forward, ShapesAndFiniteness) {
  for (Arch arch : {Arch::Pdit, Arch::Stacked, Arch::Baseline}) {
    const ModelConfig c = small(arch, 2);
    const auto obs = observations(3);
    const Outputs r = run(c, init_params(c, 4), obs);
    EXPECT_EQ(r.logits.shape(), (Shape{3, 7}));
    EXPECT_EQ(r.value.shape(), (Shape{3}));
    EXPECT_TRUE(r.logits.all_finite());
    EXPECT_TRUE(r.value.all_finite());
  }
}

TEST(Forward, Deterministic) {
  const ModelConfig c = small(Arch::Pdit, 2);
  const ModelParams params = init_params(c, 5);
  const auto obs = observations(4);
  const Outputs a = run(c, params, obs), b = run(c, params, obs);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.value, b.value);
}

TEST(Forward, BatchedEqualsSingle) {
  const ModelConfig c = small(Arch::Pdit, 1);
  const ModelParams params = init_params(c, 6);
  const auto obs = observations(3);
  const Outputs all = run(c, params, obs);
  for (std::size_t b = 0; b < 3; ++b) {
    const Outputs one = run(c, params, std::span(obs).subspan(b, 1));
    for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(one.logits[a], all.logits[b * 7 + a], 1e-5);
  }
}

TEST(Forward, NanParameterThrows) {
  const ModelConfig c = small(Arch::Pdit);
  ModelParams params = init_params(c, 7);
  params.at("P.0.attn.wq")[0] = std::nanf("");
  EXPECT_THROW(run(c, params, observations(1)), NumericError);
}

TEST(Forward, PrevTokensValidated) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 7);
  const auto obs = observations(1);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  const std::vector<int> bad_action{7}, ok_action{6}, bad_reward{2}, ok_reward{1};
  EXPECT_THROW(forward(p, c, PolicyInput{obs, bad_action, ok_reward}), InvalidArgument);
  EXPECT_THROW(forward(p, c, PolicyInput{obs, ok_action, bad_reward}), InvalidArgument);
  EXPECT_NO_THROW(forward(p, c, PolicyInput{obs, ok_action, ok_reward}));
}

TEST(Forward, PrevActionAndRewardChangeLogits) {
  const ModelConfig c = small(Arch::Pdit);
  const ModelParams params = init_params(c, 8);
  const auto obs = observations(1);
  Tape tape;
  const BoundParams p(tape, params, false, false);
  auto logits = [&](int a, int r) {
    const std::vector<int> pa{a}, pr{r};
    return forward(p, c, PolicyInput{obs, pa, pr}).logits.value();
  };
  EXPECT_NE(logits(-1, 0), logits(2, 0));
  EXPECT_NE(logits(2, 0), logits(2, 1));
}

TEST(Forward, MissionGroundingProbe) {
  // Target and distractor differ only in colour.
  env::WorldState s;
  s.agent = {3, 5};
  s.heading = env::Heading::N;
  s.target = {env::ObjectType::Ball, env::Color::Red};
  s.objects = {{env::ObjectType::Ball, env::Color::Red, {2, 2}}, {env::ObjectType::Ball, env::Color::Blue, {4, 2}}};
  const std::vector<env::Observation> obs{env::observe(s)};
  for (Arch arch : {Arch::Pdit, Arch::Baseline}) {
    const ModelConfig c = small(arch);
    ModelParams params = init_params(c, 9);
    const Outputs before = run(c, params, obs);
    params.at("text.embed").fill(0.0f);
    if (params.contains("text.pos")) params.at("text.pos").fill(0.0f);
    const Outputs after = run(c, params, obs);
    EXPECT_NE(before.logits, after.logits) << to_string(arch);
  }
}

TEST(Forward, PditEqualsStackedAtOnePair) {
  const ModelConfig a = small(Arch::Pdit, 1), b = small(Arch::Stacked, 1);
  const ModelParams params = init_params(a, 10);
  const auto obs = observations(2);
  const Outputs ra = run(a, params, obs), rb = run(b, params, obs);
  EXPECT_EQ(ra.logits, rb.logits);
  EXPECT_EQ(ra.value, rb.value);
}

TEST(Forward, OrderMattersAtTwoPairs) {
  const ModelConfig a = small(Arch::Pdit, 2), b = small(Arch::Stacked, 2);
  const ModelParams params = init_params(a, 11);
  const auto obs = observations(2);
  EXPECT_NE(run(a, params, obs).logits, run(b, params, obs).logits);
}

TEST(Forward, IdentityDecisionLayerReadsPerceptionCls) {
  const ModelConfig c = small(Arch::Pdit, 1);
  ModelParams params = init_params(c, 12);
  for (const char* name : {"D.0.attn.wo", "D.0.attn.bo", "D.0.mlp.w2", "D.0.mlp.b2"}) params.at(name).fill(0.0f);
  const auto obs = observations(2);
  const std::vector<int> pa{-1, 3}, pr{0, 1};
  Tape tape;
  const BoundParams p(tape, params, false, false);
  const Var x = encode_observation(p, c, obs);
  const Var y = encode_mission_tokens(p, c, obs);
  const HeadsOutput full = pdit_forward(p, c, x, y, pa, pr);
  const Var after_p = perception_block(p, c, 0, assemble_tokens(p, c, x, y, pa, pr), nullptr);
  const HeadsOutput direct = read_heads(p, c, after_p);
  EXPECT_EQ(full.logits.value(), direct.logits.value());
  EXPECT_EQ(full.value.value(), direct.value.value());
}

TEST(Params, CountsAndParity) {
  for (int pairs : {1, 2, 3}) {
    ModelConfig a;
    a.interleave_pairs = pairs;
    ModelConfig b = a;
    b.arch = Arch::Stacked;
    ModelConfig base = a;
    base.arch = Arch::Baseline;
    const std::size_t na = init_params(a, 0).parameter_count();
    EXPECT_EQ(na, init_params(b, 0).parameter_count());
    EXPECT_LT(init_params(base, 0).parameter_count(), na);
  }
}

TEST(Params, PartitionIsTotalAndNamesUnique) {
  for (Arch arch : {Arch::Pdit, Arch::Baseline}) {
    const ModelParams params = init_params(small(arch, 2), 0);
    std::set<std::string> names;
    std::size_t perception = 0, decision = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      EXPECT_TRUE(names.insert(params.name(i)).second);
      (params.group(i) == ParamGroup::Perception ? perception : decision) += 1;
    }
    EXPECT_GT(perception, 0u);
    EXPECT_GT(decision, 0u);
    EXPECT_EQ(perception + decision, params.size());
  }
  const ModelParams params = init_params(small(Arch::Pdit, 2), 0);
  EXPECT_EQ(params.group(*params.find("P.1.attn.wq")), ParamGroup::Perception);
  EXPECT_EQ(params.group(*params.find("obs.conv.w")), ParamGroup::Perception);
  EXPECT_EQ(params.group(*params.find("D.0.mlp.w1")), ParamGroup::Decision);
  EXPECT_EQ(params.group(*params.find("head.policy.w")), ParamGroup::Decision);
  EXPECT_EQ(params.group(*params.find("head.value.w")), ParamGroup::Decision);
}

TEST(Params, InitializationBounds) {
  const ModelParams params = init_params(small(Arch::Pdit), 13);
  const Tensor& w = params.at("P.0.mlp.w1");
  const float bound = 1.0f / std::sqrt(float(w.dim(0)));
  for (float v : w.data()) EXPECT_LE(std::abs(v), bound);
  for (float v : params.at("P.0.ln1.g").data()) EXPECT_EQ(v, 1.0f);
  for (float v : params.at("P.0.ln1.b").data()) EXPECT_EQ(v, 0.0f);
}

TEST(Config, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.interleave_pairs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_arch("transformer"), ConfigError);
  EXPECT_EQ(parse_arch("stacked"), Arch::Stacked);
}

TEST(Attention, AlignmentShapeAndBounds) {
  const ModelConfig c = small(Arch::Pdit, 2);
  const auto obs = observations(2);
  const Outputs r = run(c, init_params(c, 14), obs, true);
  ASSERT_EQ(r.attention.size(), 4u);
  for (std::size_t b = 0; b < 2; ++b) {
    const Tensor a = attention_alignment(r.attention, b);
    EXPECT_EQ(a.shape(), (Shape{5, 49}));
    for (std::size_t i = 0; i < 5; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 49; ++j) {
        EXPECT_GE(a[i * 49 + j], 0.0f);
        row += a[i * 49 + j];
      }
      EXPECT_LE(row, 1.0 + 1e-6);
    }
  }
}

TEST(Attention, BaselineHasNoRecords) {
  const ModelConfig c = small(Arch::Baseline);
  const Outputs r = run(c, init_params(c, 15), observations(1), true);
  EXPECT_TRUE(r.attention.empty());
  EXPECT_THROW(attention_alignment(r.attention), InvalidArgument);
}

TEST(GradientFlow, PpoSignalReachesBothGroups) {
  const ModelConfig c = small(Arch::Pdit, 1);
  const ModelParams params = init_params(c, 16);
  const auto obs = observations(6);
  const std::vector<int> pa{-1, 0, 1, 2, 6, 3}, pr{0, 0, 1, 0, 0, 1}, actions{0, 1, 2, 2, 1, 0};
  const std::vector<float> adv{1.0f, -0.5f, 0.3f, -1.2f, 0.8f, 0.1f}, ret{1, 0, 0, 1, 0, 1};
  for (bool freeze : {false, true}) {
    Tape tape;
    const BoundParams p(tape, params, freeze);
    const ForwardOutput out = forward(p, c, PolicyInput{obs, pa, pr});
    const Var logp = losses::action_logprobs(out.logits, actions);
    const std::vector<float> old(logp.value().data().begin(), logp.value().data().end());
    losses::LossTerms terms{losses::ppo_clip_loss(logp, old, adv, 0.2f), losses::value_loss(out.value, ret),
                            losses::entropy(out.logits), std::nullopt, std::nullopt};
    backward(losses::total_loss(terms, {}));
    double np = 0.0, nd = 0.0;
    const std::vector<Tensor> grads = p.grads();
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (float g : grads[i].data()) (params.group(i) == ParamGroup::Perception ? np : nd) += double(g) * g;
    EXPECT_GT(nd, 0.0);
    if (freeze)
      EXPECT_EQ(np, 0.0);
    else
      EXPECT_GT(np, 0.0);
  }
}

}  // namespace
}  // namespace pdit::model
