#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pdit::metrics {

/// One row of metrics.jsonl, written once per PPO update.
struct MetricsRecord {
  std::uint64_t env_step = 0;
  std::uint64_t update_index = 0;
  double mean_reward = 0.0;      // episodes finished during this update's rollout
  double success_rate = 0.0;
  double reward_variance = 0.0;  // trailing-window population variance
  double loss_ppo = 0.0;
  double loss_value = 0.0;
  double loss_entropy = 0.0;
  double loss_infonce = 0.0;
  double loss_imitation = 0.0;
  double loss_total = 0.0;
  double approx_kl = 0.0;
  double grad_norm_thetaP = 0.0;
  double grad_norm_thetaD = 0.0;
  double wall_time = 0.0;
  std::optional<double> eval_success_rate;
  std::optional<double> eval_mean_reward;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

std::string to_json_line(const MetricsRecord& r);
/// Throws CorruptArtifact on malformed rows.
MetricsRecord parse_json_line(std::string_view line);

/// Append-only metrics.jsonl writer; enforces strictly increasing env_step.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void append(const MetricsRecord& r);

 private:
  std::ofstream out_;
  std::optional<std::uint64_t> last_step_;
};

double population_variance(std::span<const double> xs);
double mean(std::span<const double> xs);

/// Var(baseline) / Var(candidate), population variance. Throws InvalidArgument
/// when a series is shorter than 2 or the candidate variance is zero.
double stability_ratio(std::span<const double> rewards_baseline, std::span<const double> rewards_candidate);

/// 100 * (1 - Var(candidate) / Var(baseline)). Throws on zero baseline variance.
double variance_reduction(std::span<const double> rewards_baseline, std::span<const double> rewards_candidate);

struct EvalPoint {
  std::uint64_t env_step = 0;
  double success_rate = 0.0;
};

inline constexpr std::size_t kConvergenceWindow = 10;

/// First env_step whose trailing-10 evaluation success mean reaches 0.95 x the
/// trailing-10 mean at the last evaluation. nullopt ("not converged") with
/// fewer than 10 evaluations or a zero final mean.
std::optional<std::uint64_t> convergence_step(std::span<const EvalPoint> history);

/// First env_step whose evaluation success rate is at least `threshold`.
std::optional<std::uint64_t> threshold_step(std::span<const EvalPoint> history, double threshold);

/// Table 1 / stability-ratio figures kept as comparison targets.
namespace reference {
inline constexpr double kStabilityRatio = 1.73;
inline constexpr double kVarianceReductionPercent = 42.0;
inline constexpr std::uint64_t kConvergenceSteps = 160'000;
inline constexpr double kMeanEpisodeReward = 0.27;
inline constexpr double kMeanEpisodeRewardStd = 0.36;
inline constexpr double kEntropyCoefficient = 0.004;
}  // namespace reference

}  // namespace pdit::metrics
