#include "pdit/model.hpp"

#include <cmath>

#include "pdit/error.hpp"
#include "pdit/rng.hpp"

namespace pdit::model {
namespace {

std::string layer_prefix(char kind, int layer) { return std::string(1, kind) + "." + std::to_string(layer) + "."; }

Tensor uniform(Shape shape, double bound, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return t;
}

class ParamBuilder {
 public:
  ParamBuilder(ModelParams& out, std::uint64_t seed) : out_(out), rng_(seed) {}

  void weight(const std::string& name, ParamGroup g, std::size_t fan_in, std::size_t fan_out) {
    out_.add(name, g, uniform({fan_in, fan_out}, 1.0 / std::sqrt(double(fan_in)), rng_));
  }
  // Embedding rows act like a linear layer on a one-hot input (fan_in 1).
  void table(const std::string& name, ParamGroup g, std::size_t rows, std::size_t dim) {
    out_.add(name, g, uniform({rows, dim}, 1.0, rng_));
  }
  void zeros(const std::string& name, ParamGroup g, std::size_t n) { out_.add(name, g, Tensor({n}, 0.0f)); }
  void ones(const std::string& name, ParamGroup g, std::size_t n) { out_.add(name, g, Tensor({n}, 1.0f)); }

  void block(const std::string& pre, ParamGroup g, std::size_t h, std::size_t mlp) {
    ones(pre + "ln1.g", g, h);
    zeros(pre + "ln1.b", g, h);
    weight(pre + "attn.wq", g, h, h);
    weight(pre + "attn.wk", g, h, h);
    weight(pre + "attn.wv", g, h, h);
    weight(pre + "attn.wo", g, h, h);
    zeros(pre + "attn.bo", g, h);
    ones(pre + "ln2.g", g, h);
    zeros(pre + "ln2.b", g, h);
    weight(pre + "mlp.w1", g, h, mlp);
    zeros(pre + "mlp.b1", g, mlp);
    weight(pre + "mlp.w2", g, mlp, h);
    zeros(pre + "mlp.b2", g, h);
  }

 private:
  ModelParams& out_;
  SplitMix64 rng_;
};

// Per-cell id lists for the three embedding tables, batch-major.
struct ViewIds {
  std::vector<int> type, color, state;
};

ViewIds view_ids(std::span<const env::Observation> obs) {
  ViewIds ids;
  const std::size_t n = obs.size() * kVisualTokens;
  ids.type.reserve(n);
  ids.color.reserve(n);
  ids.state.reserve(n);
  for (const auto& o : obs)
    for (std::size_t cell = 0; cell < kVisualTokens; ++cell) {
      const int t = o.view[cell * 3], c = o.view[cell * 3 + 1], s = o.view[cell * 3 + 2];
      if (t >= env::kViewTypeIds || c >= env::kViewColorIds || s >= env::kViewStateIds)
        throw InvalidArgument("observation id out of range at cell " + std::to_string(cell));
      ids.type.push_back(t);
      ids.color.push_back(c);
      ids.state.push_back(s);
    }
  return ids;
}

// Summed cell embeddings reshaped to a [B, 7, 7, H] feature map.
Var cell_features(const BoundParams& p, std::span<const env::Observation> obs, std::size_t h) {
  const ViewIds ids = view_ids(obs);
  Var e = add(add(embedding(p["obs.type_embed"], ids.type), embedding(p["obs.color_embed"], ids.color)),
              embedding(p["obs.state_embed"], ids.state));
  const auto side = static_cast<std::size_t>(env::kViewSize);
  return reshape(e, {obs.size(), side, side, h});
}

Var split_heads(const Var& x, std::size_t heads) {
  const Shape& s = x.shape();  // [B, T, H]
  const std::size_t dh = s[2] / heads;
  return reshape(swap_axes_12(reshape(x, {s[0], s[1], heads, dh})), {s[0] * heads, s[1], dh});
}

Var merge_heads(const Var& x, std::size_t batch, std::size_t heads) {
  const Shape& s = x.shape();  // [B*heads, T, dh]
  return reshape(swap_axes_12(reshape(x, {batch, heads, s[1], s[2]})), {batch, s[1], heads * s[2]});
}

void keep_record(std::vector<AttentionRecord>* records, LayerKind kind, int layer, const Var& weights,
                 std::size_t batch, std::size_t heads) {
  if (records == nullptr) return;
  const Shape& s = weights.shape();
  records->push_back({kind, layer, weights.value().reshaped({batch, heads, s[1], s[2]})});
}

Var mlp(const BoundParams& p, const std::string& pre, const Var& x) {
  Var h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]);
  h = gelu(linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"]));
  return linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"]);
}

}  // namespace

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::Pdit:
      return "pdit";
    case Arch::Stacked:
      return "stacked";
    case Arch::Baseline:
      return "baseline";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  if (name == "pdit") return Arch::Pdit;
  if (name == "stacked") return Arch::Stacked;
  if (name == "baseline") return Arch::Baseline;
  throw ConfigError("arch: unknown architecture '" + std::string(name) + "' (expected pdit|stacked|baseline)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(hidden_dim > 0, "model.hidden_dim: must be positive");
  require(heads > 0 && hidden_dim % heads == 0, "model.heads: must divide hidden_dim");
  require(interleave_pairs >= 1, "model.interleave_pairs: must be >= 1");
  require(mission_embed_dim > 0, "model.mission_embed_dim: must be positive");
  require(mlp_ratio > 0, "model.mlp_ratio: must be positive");
  require(conv_kernel > 0 && conv_kernel % 2 == 1, "model.conv_kernel: must be a positive odd number");
  require(conv_stride == 1, "model.conv_stride: only stride 1 is supported");
  require(2 * conv_padding == conv_kernel - 1, "model.conv_padding: must preserve the 7x7 map");
  require(action_count == env::kActionCount, "model.action_count: must be 7");
  require(baseline_channels > 0, "model.baseline_channels: must be positive");
}

void ModelParams::add(std::string name, ParamGroup group, Tensor value) {
  if (index_.contains(name)) throw InvalidArgument("duplicate parameter " + name);
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  groups_.push_back(group);
  tensors_.push_back(std::move(value));
}

std::optional<std::size_t> ModelParams::find(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const Tensor& ModelParams::at(std::string_view name) const {
  const auto i = find(name);
  if (!i) throw InvalidArgument("no parameter named " + std::string(name));
  return tensors_[*i];
}

Tensor& ModelParams::at(std::string_view name) {
  const auto i = find(name);
  if (!i) throw InvalidArgument("no parameter named " + std::string(name));
  return tensors_[*i];
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ModelParams params;
  ParamBuilder b(params, seed);
  const auto h = static_cast<std::size_t>(c.hidden_dim);
  const auto k = static_cast<std::size_t>(c.conv_kernel);
  const auto me = static_cast<std::size_t>(c.mission_embed_dim);
  const auto actions = static_cast<std::size_t>(c.action_count);
  constexpr auto P = ParamGroup::Perception;
  constexpr auto D = ParamGroup::Decision;

  b.table("obs.type_embed", P, env::kViewTypeIds, h);
  b.table("obs.color_embed", P, env::kViewColorIds, h);
  b.table("obs.state_embed", P, env::kViewStateIds, h);
  b.table("text.embed", P, env::kVocabSize, me);

  if (c.arch == Arch::Baseline) {
    const auto ch = static_cast<std::size_t>(c.baseline_channels);
    b.weight("obs.conv.w", P, k * k * h, ch);
    b.zeros("obs.conv.b", P, ch);
    b.weight("align.v.w", P, ch, h);
    b.weight("align.t.w", P, me, h);
    b.weight("mlp.w1", D, kVisualTokens * ch + me, h);
    b.zeros("mlp.b1", D, h);
    b.weight("mlp.w2", D, h, h);
    b.zeros("mlp.b2", D, h);
  } else {
    const std::size_t side = env::kViewSize;
    b.weight("obs.conv.w", P, k * k * h, h);
    b.zeros("obs.conv.b", P, h);
    b.table("obs.pos_row", P, side, h);
    b.table("obs.pos_col", P, side, h);
    b.table("text.pos", P, kMissionTokens, me);
    b.weight("text.proj.w", P, me, h);
    b.zeros("text.proj.b", P, h);
    b.weight("align.v.w", P, h, h);
    b.weight("align.t.w", P, h, h);
    b.table("tok.prev_action", P, actions + 1, h);
    b.table("tok.prev_reward", P, 2, h);
    b.table("tok.cls", D, 1, h);
    const std::size_t mlp_dim = h * static_cast<std::size_t>(c.mlp_ratio);
    for (int l = 0; l < c.interleave_pairs; ++l) b.block(layer_prefix('P', l), P, h, mlp_dim);
    for (int l = 0; l < c.interleave_pairs; ++l) b.block(layer_prefix('D', l), D, h, mlp_dim);
    b.ones("head.ln.g", D, h);
    b.zeros("head.ln.b", D, h);
  }
  b.weight("head.policy.w", D, h, actions);
  b.zeros("head.policy.b", D, actions);
  b.weight("head.value.w", D, h, 1);
  b.zeros("head.value.b", D, 1);
  return params;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool freeze_perception, bool requires_grad)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool trainable = requires_grad && !(freeze_perception && params.group(i) == ParamGroup::Perception);
    vars_.push_back(tape.leaf(params.tensors()[i], trainable));
  }
}

BoundParams::BoundParams(const ModelParams& params, std::vector<Var> vars)
    : tape_(vars.empty() ? nullptr : &vars.front().tape()), params_(&params), vars_(std::move(vars)) {
  if (vars_.size() != params.size()) throw InvalidArgument("BoundParams: expected one var per parameter");
  for (std::size_t i = 0; i < vars_.size(); ++i)
    if (vars_[i].shape() != params.tensors()[i].shape())
      throw InvalidArgument("BoundParams: shape mismatch for " + params.name(i));
}

Var BoundParams::operator[](std::string_view name) const {
  const auto i = params_->find(name);
  if (!i) throw InvalidArgument("model has no parameter " + std::string(name));
  return vars_[*i];
}

std::vector<Tensor> BoundParams::grads() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const Var& v : vars_) out.push_back(tape_->grad_of(v));
  return out;
}

Var encode_observation(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs) {
  const auto h = static_cast<std::size_t>(c.hidden_dim);
  const std::size_t batch = obs.size();
  Var fmap = relu(conv2d(cell_features(p, obs, h), p["obs.conv.w"], p["obs.conv.b"],
                         static_cast<std::size_t>(c.conv_kernel), static_cast<std::size_t>(c.conv_padding)));
  std::vector<int> rows, cols;
  rows.reserve(batch * kVisualTokens);
  cols.reserve(batch * kVisualTokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (int r = 0; r < env::kViewSize; ++r)
      for (int col = 0; col < env::kViewSize; ++col) {
        rows.push_back(r);
        cols.push_back(col);
      }
  Var pos = add(embedding(p["obs.pos_row"], rows), embedding(p["obs.pos_col"], cols));
  return add(reshape(fmap, {batch, kVisualTokens, h}), reshape(pos, {batch, kVisualTokens, h}));
}

Var encode_mission_tokens(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs) {
  const std::size_t batch = obs.size();
  std::vector<int> ids, pos;
  ids.reserve(batch * kMissionTokens);
  pos.reserve(batch * kMissionTokens);
  for (const auto& o : obs)
    for (std::size_t i = 0; i < kMissionTokens; ++i) {
      ids.push_back(o.mission[i]);
      pos.push_back(static_cast<int>(i));
    }
  Var e = add(embedding(p["text.embed"], ids), embedding(p["text.pos"], pos));
  Var y = linear(e, p["text.proj.w"], p["text.proj.b"]);
  return reshape(y, {batch, kMissionTokens, static_cast<std::size_t>(c.hidden_dim)});
}

Var assemble_tokens(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                    std::span<const int> prev_actions, std::span<const int> prev_rewards) {
  const std::size_t batch = x.shape()[0];
  const auto h = static_cast<std::size_t>(c.hidden_dim);
  if (prev_actions.size() != batch || prev_rewards.size() != batch || y.shape()[0] != batch)
    throw InvalidArgument("assemble_tokens: batch sizes differ");
  std::vector<int> act(batch), rew(batch), cls(batch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const int a = prev_actions[b];
    if (a < -1 || a >= c.action_count) throw InvalidArgument("previous action out of range");
    act[b] = a < 0 ? kNoPrevAction : a;
    if (prev_rewards[b] != 0 && prev_rewards[b] != 1) throw InvalidArgument("previous reward must be 0 or 1");
    rew[b] = prev_rewards[b];
  }
  const std::vector<Var> parts{x, y, reshape(embedding(p["tok.prev_action"], act), {batch, 1, h}),
                               reshape(embedding(p["tok.prev_reward"], rew), {batch, 1, h}),
                               reshape(embedding(p["tok.cls"], cls), {batch, 1, h})};
  return concat(parts, 1);
}

Var perception_block(const BoundParams& p, const ModelConfig& c, int layer, const Var& tokens,
                     std::vector<AttentionRecord>* records) {
  const std::string pre = layer_prefix('P', layer);
  const std::size_t batch = tokens.shape()[0];
  const auto heads = static_cast<std::size_t>(c.heads);
  Var h = layer_norm(tokens, p[pre + "ln1.g"], p[pre + "ln1.b"]);
  const AttentionResult a = attention(split_heads(linear(h, p[pre + "attn.wq"]), heads),
                                      split_heads(linear(h, p[pre + "attn.wk"]), heads),
                                      split_heads(linear(h, p[pre + "attn.wv"]), heads));
  keep_record(records, LayerKind::Perception, layer, a.weights, batch, heads);
  Var x = add(tokens, linear(merge_heads(a.output, batch, heads), p[pre + "attn.wo"], p[pre + "attn.bo"]));
  return add(x, mlp(p, pre, x));
}

Var decision_block(const BoundParams& p, const ModelConfig& c, int layer, const Var& tokens,
                   std::vector<AttentionRecord>* records) {
  const std::string pre = layer_prefix('D', layer);
  const std::size_t batch = tokens.shape()[0];
  const auto heads = static_cast<std::size_t>(c.heads);
  Var h = layer_norm(tokens, p[pre + "ln1.g"], p[pre + "ln1.b"]);
  Var query = linear(slice(h, 1, kClsToken, 1), p[pre + "attn.wq"]);
  const AttentionResult a = attention(split_heads(query, heads), split_heads(linear(h, p[pre + "attn.wk"]), heads),
                                      split_heads(linear(h, p[pre + "attn.wv"]), heads));
  keep_record(records, LayerKind::Decision, layer, a.weights, batch, heads);
  Var cls = add(slice(tokens, 1, kClsToken, 1),
                linear(merge_heads(a.output, batch, heads), p[pre + "attn.wo"], p[pre + "attn.bo"]));
  cls = add(cls, mlp(p, pre, cls));
  const std::vector<Var> parts{slice(tokens, 1, 0, kClsToken), cls};
  return concat(parts, 1);
}

HeadsOutput read_heads(const BoundParams& p, const ModelConfig& c, const Var& tokens) {
  const std::size_t batch = tokens.shape()[0];
  Var cls = reshape(slice(tokens, 1, kClsToken, 1), {batch, static_cast<std::size_t>(c.hidden_dim)});
  cls = layer_norm(cls, p["head.ln.g"], p["head.ln.b"]);
  HeadsOutput out;
  out.logits = linear(cls, p["head.policy.w"], p["head.policy.b"]);
  out.value = reshape(linear(cls, p["head.value.w"], p["head.value.b"]), {batch});
  return out;
}

HeadsOutput pdit_forward(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                         std::span<const int> prev_actions, std::span<const int> prev_rewards,
                         bool record_attention) {
  std::vector<AttentionRecord> records;
  auto* rec = record_attention ? &records : nullptr;
  Var tokens = assemble_tokens(p, c, x, y, prev_actions, prev_rewards);
  for (int l = 0; l < c.interleave_pairs; ++l) {
    tokens = perception_block(p, c, l, tokens, rec);
    tokens = decision_block(p, c, l, tokens, rec);
  }
  HeadsOutput out = read_heads(p, c, tokens);
  out.attention = std::move(records);
  return out;
}

HeadsOutput stacked_forward(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                            std::span<const int> prev_actions, std::span<const int> prev_rewards,
                            bool record_attention) {
  std::vector<AttentionRecord> records;
  auto* rec = record_attention ? &records : nullptr;
  Var tokens = assemble_tokens(p, c, x, y, prev_actions, prev_rewards);
  for (int l = 0; l < c.interleave_pairs; ++l) tokens = perception_block(p, c, l, tokens, rec);
  for (int l = 0; l < c.interleave_pairs; ++l) tokens = decision_block(p, c, l, tokens, rec);
  HeadsOutput out = read_heads(p, c, tokens);
  out.attention = std::move(records);
  return out;
}

namespace {

struct BaselineFeatures {
  Var fmap;     // [B, 49, channels]
  Var mission;  // [B, mission_embed_dim]
};

BaselineFeatures baseline_features(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs) {
  const std::size_t batch = obs.size();
  const auto h = static_cast<std::size_t>(c.hidden_dim);
  const auto ch = static_cast<std::size_t>(c.baseline_channels);
  const auto me = static_cast<std::size_t>(c.mission_embed_dim);
  Var fmap = relu(conv2d(cell_features(p, obs, h), p["obs.conv.w"], p["obs.conv.b"],
                         static_cast<std::size_t>(c.conv_kernel), static_cast<std::size_t>(c.conv_padding)));
  std::vector<int> ids;
  ids.reserve(batch * kMissionTokens);
  for (const auto& o : obs) ids.insert(ids.end(), o.mission.begin(), o.mission.end());
  Var words = reshape(embedding(p["text.embed"], ids), {batch, kMissionTokens, me});
  return {reshape(fmap, {batch, kVisualTokens, ch}), mean_axis(words, 1)};
}

HeadsOutput baseline_heads(const BoundParams& p, const ModelConfig& c, const BaselineFeatures& f) {
  const std::size_t batch = f.fmap.shape()[0];
  const std::size_t flat = kVisualTokens * static_cast<std::size_t>(c.baseline_channels);
  const std::vector<Var> parts{reshape(f.fmap, {batch, flat}), f.mission};
  Var h = relu(linear(concat(parts, 1), p["mlp.w1"], p["mlp.b1"]));
  h = relu(linear(h, p["mlp.w2"], p["mlp.b2"]));
  HeadsOutput out;
  out.logits = linear(h, p["head.policy.w"], p["head.policy.b"]);
  out.value = reshape(linear(h, p["head.value.w"], p["head.value.b"]), {batch});
  return out;
}

}  // namespace

HeadsOutput baseline_forward(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs) {
  return baseline_heads(p, c, baseline_features(p, c, obs));
}

ForwardOutput forward(const BoundParams& p, const ModelConfig& c, const PolicyInput& in,
                      const ForwardOptions& options) {
  if (in.batch() == 0) throw InvalidArgument("forward: empty batch");
  ForwardOutput out;
  if (c.arch == Arch::Baseline) {
    const BaselineFeatures f = baseline_features(p, c, in.observations);
    HeadsOutput h = baseline_heads(p, c, f);
    out.logits = h.logits;
    out.value = h.value;
    out.visual_embed = linear(mean_axis(f.fmap, 1), p["align.v.w"]);
    out.text_embed = linear(f.mission, p["align.t.w"]);
    return out;
  }
  Var x = encode_observation(p, c, in.observations);
  Var y = encode_mission_tokens(p, c, in.observations);
  HeadsOutput h = c.arch == Arch::Pdit
                      ? pdit_forward(p, c, x, y, in.prev_actions, in.prev_rewards, options.record_attention)
                      : stacked_forward(p, c, x, y, in.prev_actions, in.prev_rewards, options.record_attention);
  out.logits = h.logits;
  out.value = h.value;
  out.attention = std::move(h.attention);
  out.visual_embed = linear(mean_axis(x, 1), p["align.v.w"]);
  out.text_embed = linear(mean_axis(y, 1), p["align.t.w"]);
  return out;
}

Tensor attention_alignment(std::span<const AttentionRecord> records, std::size_t batch_index) {
  Tensor out({kMissionTokens, kVisualTokens}, 0.0f);
  std::size_t used = 0;
  for (const AttentionRecord& r : records) {
    if (r.kind != LayerKind::Perception) continue;
    const Shape& s = r.weights.shape();  // [B, heads, 57, 57]
    if (batch_index >= s[0]) throw InvalidArgument("attention_alignment: batch index out of range");
    const std::size_t heads = s[1], q = s[2], k = s[3];
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const float* w = r.weights.ptr() + (batch_index * heads + hd) * q * k;
      for (std::size_t i = 0; i < kMissionTokens; ++i)
        for (std::size_t j = 0; j < kVisualTokens; ++j) out[i * kVisualTokens + j] += w[(kMissionBegin + i) * k + j];
    }
    used += heads;
  }
  if (used == 0) throw InvalidArgument("attention_alignment: no perception attention records (baseline arch?)");
  for (float& v : out.data()) v /= static_cast<float>(used);
  return out;
}

}  // namespace pdit::model
