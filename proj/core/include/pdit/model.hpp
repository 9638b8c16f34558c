#pragma once

// Policy networks. Three architectures share one parameter store:
//
//   pdit      tokens -> P1 D1 P2 D2 ... PL DL -> heads   (interleaved)
//   stacked   tokens -> P1 ... PL D1 ... DL -> heads     (same parameters, other order)
//   baseline  conv stem + mission mean-pool -> MLP -> heads
//
// Token sequence for the transformer variants, per sample:
//   [49 visual] [5 mission] [prev action] [prev reward] [CLS]
// P layers run full self-attention + MLP over all 57 tokens. D layers let the
// CLS token alone query every token, then apply an MLP to CLS. Policy logits
// and the value estimate are read off the final CLS state.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pdit/env.hpp"
#include "pdit/tensor.hpp"

namespace pdit::model {

enum class Arch { Pdit, Stacked, Baseline };

std::string_view to_string(Arch arch);
/// Throws ConfigError for unknown names.
Arch parse_arch(std::string_view name);

inline constexpr std::size_t kVisualTokens = env::kViewCells;  // 49
inline constexpr std::size_t kMissionTokens = env::kMissionLength;
inline constexpr std::size_t kMissionBegin = kVisualTokens;
inline constexpr std::size_t kPrevActionToken = kMissionBegin + kMissionTokens;
inline constexpr std::size_t kPrevRewardToken = kPrevActionToken + 1;
inline constexpr std::size_t kClsToken = kPrevRewardToken + 1;
inline constexpr std::size_t kSequenceLength = kClsToken + 1;  // 57
/// Row of the previous-action table used at t = 0.
inline constexpr int kNoPrevAction = env::kActionCount;

struct ModelConfig {
  Arch arch = Arch::Pdit;
  int hidden_dim = 64;
  int heads = 2;
  int interleave_pairs = 2;
  int mission_embed_dim = 128;
  int mlp_ratio = 2;
  int conv_kernel = 3;
  int conv_stride = 1;
  int conv_padding = 1;
  int action_count = env::kActionCount;
  /// Output channels of the baseline's conv stem.
  int baseline_channels = 16;

  /// Throws ConfigError.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamGroup { Perception, Decision };

/// Named parameters in a stable order, partitioned into perception (theta_P)
/// and decision (theta_D) groups.
class ModelParams {
 public:
  void add(std::string name, ParamGroup group, Tensor value);

  std::size_t size() const noexcept { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  ParamGroup group(std::size_t i) const { return groups_.at(i); }
  std::span<Tensor> tensors() noexcept { return tensors_; }
  std::span<const Tensor> tensors() const noexcept { return tensors_; }

  std::optional<std::size_t> find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name).has_value(); }
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);

  /// Total number of scalars.
  std::size_t parameter_count() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.names_ == b.names_ && a.groups_ == b.groups_ && a.tensors_ == b.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Parameters placed on a tape as leaves.
class BoundParams {
 public:
  /// With freeze_perception, theta_P leaves are constants and never receive
  /// gradient (the frozen-encoder control). With requires_grad = false every
  /// leaf is a constant (inference).
  BoundParams(Tape& tape, const ModelParams& params, bool freeze_perception = false, bool requires_grad = true);
  /// Uses existing leaves, aligned with the parameter order (gradient checks).
  BoundParams(const ModelParams& params, std::vector<Var> vars);

  Var operator[](std::string_view name) const;
  Var at(std::size_t i) const { return vars_.at(i); }
  std::size_t size() const noexcept { return vars_.size(); }
  Tape& tape() const noexcept { return *tape_; }

  /// Gradients after backward(), aligned with the parameter order.
  std::vector<Tensor> grads() const;

 private:
  Tape* tape_;
  const ModelParams* params_;
  std::vector<Var> vars_;
};

enum class LayerKind { Perception, Decision };

struct AttentionRecord {
  LayerKind kind = LayerKind::Perception;
  int layer = 0;
  Tensor weights;  // [B, heads, queries, keys]
};

struct PolicyInput {
  std::span<const env::Observation> observations;
  std::span<const int> prev_actions;  // -1 for "none" at t = 0
  std::span<const int> prev_rewards;  // 0 or 1
  std::size_t batch() const noexcept { return observations.size(); }
};

struct ForwardOptions {
  bool record_attention = false;
  bool freeze_perception = false;
};

struct HeadsOutput {
  Var logits;  // [B, actions]
  Var value;   // [B]
  std::vector<AttentionRecord> attention;
};

struct ForwardOutput {
  Var logits;         // [B, actions]
  Var value;          // [B]
  Var visual_embed;   // [B, hidden] f_v(o_t), input to the contrastive loss
  Var text_embed;     // [B, hidden] f_t(m_t)
  std::vector<AttentionRecord> attention;
};

/// x_t: embed per-cell (type, color, state) ids, sum, 3x3 conv + ReLU over
/// the 7x7 map, flatten and add learned row/column embeddings. [B, 49, H]
Var encode_observation(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs);

/// y_t: token + position embeddings (mission_embed_dim) projected to H. [B, 5, H]
Var encode_mission_tokens(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs);

/// Assembles the 57-token sequence [B, 57, H].
Var assemble_tokens(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                    std::span<const int> prev_actions, std::span<const int> prev_rewards);

/// Pre-norm self-attention + MLP over every token.
Var perception_block(const BoundParams& p, const ModelConfig& c, int layer, const Var& tokens,
                     std::vector<AttentionRecord>* records);
/// CLS-only query over every token, then MLP on CLS; other tokens pass through.
Var decision_block(const BoundParams& p, const ModelConfig& c, int layer, const Var& tokens,
                   std::vector<AttentionRecord>* records);
/// Policy/value heads on the CLS state of `tokens`.
HeadsOutput read_heads(const BoundParams& p, const ModelConfig& c, const Var& tokens);

HeadsOutput pdit_forward(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                         std::span<const int> prev_actions, std::span<const int> prev_rewards,
                         bool record_attention = false);
HeadsOutput stacked_forward(const BoundParams& p, const ModelConfig& c, const Var& x, const Var& y,
                            std::span<const int> prev_actions, std::span<const int> prev_rewards,
                            bool record_attention = false);
HeadsOutput baseline_forward(const BoundParams& p, const ModelConfig& c, std::span<const env::Observation> obs);

/// Dispatches on config.arch and also produces the contrastive embeddings.
ForwardOutput forward(const BoundParams& p, const ModelConfig& c, const PolicyInput& in,
                      const ForwardOptions& options = {});

/// Mean over heads and P layers of attention mass from each mission token to
/// each visual token for one batch element. [5, 49]. Throws InvalidArgument
/// when no perception records exist (baseline).
Tensor attention_alignment(std::span<const AttentionRecord> records, std::size_t batch_index = 0);

/// Convenience: params + config bundled.
struct Model {
  ModelConfig config;
  ModelParams params;
};

}  // namespace pdit::model
