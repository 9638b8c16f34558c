#include "pdit/metrics.hpp"

#include <nlohmann/json.hpp>

#include "pdit/error.hpp"

namespace pdit::metrics {
namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["env_step"] = r.env_step;
  j["update_index"] = r.update_index;
  j["mean_reward"] = r.mean_reward;
  j["success_rate"] = r.success_rate;
  j["reward_variance"] = r.reward_variance;
  j["loss_ppo"] = r.loss_ppo;
  j["loss_value"] = r.loss_value;
  j["loss_entropy"] = r.loss_entropy;
  j["loss_infonce"] = r.loss_infonce;
  j["loss_imitation"] = r.loss_imitation;
  j["loss_total"] = r.loss_total;
  j["approx_kl"] = r.approx_kl;
  j["grad_norm_thetaP"] = r.grad_norm_thetaP;
  j["grad_norm_thetaD"] = r.grad_norm_thetaD;
  j["wall_time"] = r.wall_time;
  j["eval_success_rate"] = optional_json(r.eval_success_rate);
  j["eval_mean_reward"] = optional_json(r.eval_mean_reward);
  return j.dump();
}

MetricsRecord parse_json_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.env_step = j.at("env_step").get<std::uint64_t>();
    r.update_index = j.at("update_index").get<std::uint64_t>();
    r.mean_reward = j.at("mean_reward").get<double>();
    r.success_rate = j.at("success_rate").get<double>();
    r.reward_variance = j.at("reward_variance").get<double>();
    r.loss_ppo = j.at("loss_ppo").get<double>();
    r.loss_value = j.at("loss_value").get<double>();
    r.loss_entropy = j.at("loss_entropy").get<double>();
    r.loss_infonce = j.at("loss_infonce").get<double>();
    r.loss_imitation = j.at("loss_imitation").get<double>();
    r.loss_total = j.at("loss_total").get<double>();
    r.approx_kl = j.at("approx_kl").get<double>();
    r.grad_norm_thetaP = j.at("grad_norm_thetaP").get<double>();
    r.grad_norm_thetaD = j.at("grad_norm_thetaD").get<double>();
    r.wall_time = j.at("wall_time").get<double>();
    r.eval_success_rate = optional_from(j, "eval_success_rate");
    r.eval_mean_reward = optional_from(j, "eval_mean_reward");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptArtifact(std::string("malformed metrics row: ") + e.what());
  }
}

MetricsWriter::MetricsWriter(const std::string& path) : out_(path, std::ios::out | std::ios::trunc) {
  if (!out_) throw Error("cannot open " + path + " for writing");
}

void MetricsWriter::append(const MetricsRecord& r) {
  if (last_step_ && r.env_step <= *last_step_) throw InvalidArgument("metrics env_step must strictly increase");
  if (r.reward_variance < 0.0) throw InvalidArgument("metrics reward_variance must be >= 0");
  last_step_ = r.env_step;
  out_ << to_json_line(r) << '\n';
  out_.flush();
}

double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

double population_variance(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  const double mu = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - mu) * (x - mu);
  return s / double(xs.size());
}

double stability_ratio(std::span<const double> rewards_baseline, std::span<const double> rewards_candidate) {
  if (rewards_baseline.size() < 2 || rewards_candidate.size() < 2)
    throw InvalidArgument("stability_ratio: both series need at least 2 values");
  const double denom = population_variance(rewards_candidate);
  if (denom == 0.0) throw InvalidArgument("stability_ratio: candidate variance is zero");
  return population_variance(rewards_baseline) / denom;
}

double variance_reduction(std::span<const double> rewards_baseline, std::span<const double> rewards_candidate) {
  if (rewards_baseline.size() < 2 || rewards_candidate.size() < 2)
    throw InvalidArgument("variance_reduction: both series need at least 2 values");
  const double base = population_variance(rewards_baseline);
  if (base == 0.0) throw InvalidArgument("variance_reduction: baseline variance is zero");
  return 100.0 * (1.0 - population_variance(rewards_candidate) / base);
}

std::optional<std::uint64_t> convergence_step(std::span<const EvalPoint> history) {
  const std::size_t w = kConvergenceWindow;
  if (history.size() < w) return std::nullopt;
  auto trailing = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t i = end + 1 - w; i <= end; ++i) s += history[i].success_rate;
    return s / double(w);
  };
  const double final_mean = trailing(history.size() - 1);
  if (final_mean <= 0.0) return std::nullopt;
  for (std::size_t i = w - 1; i < history.size(); ++i)
    if (trailing(i) >= 0.95 * final_mean) return history[i].env_step;
  return std::nullopt;
}

std::optional<std::uint64_t> threshold_step(std::span<const EvalPoint> history, double threshold) {
  for (const EvalPoint& p : history)
    if (p.success_rate >= threshold) return p.env_step;
  return std::nullopt;
}

}  // namespace pdit::metrics
