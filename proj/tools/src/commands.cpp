#include "pdit_cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>

#include "pdit/checkpoint.hpp"
#include "pdit/config.hpp"
#include "pdit/error.hpp"
#include "pdit/metrics.hpp"
#include "pdit_cli/gradcheck_suite.hpp"

namespace pdit::cli {
namespace {

using nlohmann::ordered_json;

ordered_json optional_step(const std::optional<std::uint64_t>& s) {
  return s ? ordered_json(*s) : ordered_json(nullptr);
}

ordered_json optional_number(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? ordered_json(*v) : ordered_json(nullptr);
}

ordered_json eval_stats_json(const trainer::EvalStats& s, int episodes, std::uint64_t seed_base) {
  return {{"episodes", episodes},         {"seed_base", seed_base},
          {"mean_reward", s.mean_reward}, {"std_reward", s.std_reward},
          {"success_rate", s.success_rate}, {"mean_length", s.mean_length}};
}

const std::filesystem::path& require_path(const std::optional<std::filesystem::path>& p, const char* flag) {
  if (!p) throw ConfigError(std::string(flag) + ": required for this command");
  return *p;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::optional<double> median(std::vector<double> xs) {
  if (xs.empty()) return std::nullopt;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Var(variant) / Var(full); nullopt when the full-run variance is zero.
std::optional<double> ratio_vs(const VariantRun& variant, const VariantRun& full) {
  if (metrics::population_variance(full.trailing_rewards) == 0.0) return std::nullopt;
  return metrics::stability_ratio(variant.trailing_rewards, full.trailing_rewards);
}

std::optional<double> reduction_vs(const VariantRun& variant, const VariantRun& full) {
  if (metrics::population_variance(variant.trailing_rewards) == 0.0) return std::nullopt;
  return metrics::variance_reduction(variant.trailing_rewards, full.trailing_rewards);
}

/// Median threshold step; runs that never reached the threshold count as
/// infinitely late.
std::optional<double> median_threshold(const std::vector<VariantRun>& runs) {
  std::vector<double> steps;
  for (const VariantRun& r : runs)
    steps.push_back(r.threshold_step ? double(*r.threshold_step) : std::numeric_limits<double>::infinity());
  return median(steps);
}

}  // namespace

trainer::TrainConfig load_config(const Options& opts) {
  trainer::TrainConfig c = opts.config ? config::load(*opts.config) : trainer::TrainConfig{};
  if (opts.seed) c.seed = *opts.seed;
  if (opts.arch) c.model.arch = model::parse_arch(*opts.arch);
  c.validate();
  return c;
}

int cmd_train(const Options& opts, std::ostream& out) {
  const trainer::TrainConfig c = load_config(opts);
  const std::filesystem::path& dir = require_path(opts.out, "--out");
  const trainer::TrainResult r = trainer::train(c, dir);
  ordered_json summary;
  summary["out"] = dir.string();
  summary["arch"] = std::string(model::to_string(r.model.config.arch));
  summary["env_steps"] = r.env_steps;
  summary["updates"] = r.records.size();
  summary["parameter_count"] = r.parameter_count;
  summary["final_eval"] = eval_stats_json(r.final_eval, c.eval.episodes, c.eval.seed_base);
  summary["convergence_step"] = optional_step(r.convergence_step);
  summary["threshold_step"] = optional_step(r.threshold_step);
  out << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const Options& opts, std::ostream& out) {
  const checkpoint::Checkpoint ckpt = checkpoint::load(require_path(opts.checkpoint, "--checkpoint"));
  const int episodes = opts.episodes.value_or(100);
  if (episodes <= 0) throw ConfigError("--episodes: must be > 0");
  const std::uint64_t seed_base = opts.seed.value_or(trainer::EvalConfig{}.seed_base);
  const trainer::EvalStats s = trainer::evaluate(ckpt.model, episodes, seed_base, ckpt.env);
  ordered_json j = eval_stats_json(s, episodes, seed_base);
  j["arch"] = std::string(model::to_string(ckpt.model.config.arch));
  out << j.dump(2) << "\n";
  return kExitOk;
}

std::string ablation_report(const std::vector<std::pair<std::string, std::vector<VariantRun>>>& runs,
                            double success_threshold) {
  const std::vector<VariantRun>* full = nullptr;
  for (const auto& [name, list] : runs)
    if (name == "full") full = &list;
  if (full == nullptr) throw InvalidArgument("ablation_report: missing the full variant");

  ordered_json variants = ordered_json::array();
  std::vector<std::uint64_t> budgets;
  for (const auto& [name, list] : runs) {
    if (list.size() != full->size()) throw InvalidArgument("ablation_report: variants differ in seed count");
    ordered_json rows = ordered_json::array();
    std::vector<double> ratios, reductions, successes;
    for (std::size_t i = 0; i < list.size(); ++i) {
      const VariantRun& r = list[i];
      const std::optional<double> ratio = ratio_vs(r, (*full)[i]);
      const std::optional<double> reduction = reduction_vs(r, (*full)[i]);
      if (ratio) ratios.push_back(*ratio);
      if (reduction) reductions.push_back(*reduction);
      successes.push_back(r.final_success);
      budgets.push_back(r.env_steps);
      rows.push_back({{"seed", r.seed},
                      {"env_steps", r.env_steps},
                      {"parameter_count", r.parameter_count},
                      {"final_success", r.final_success},
                      {"convergence_step", optional_step(r.convergence_step)},
                      {"threshold_step", optional_step(r.threshold_step)},
                      {"reward_variance", metrics::population_variance(r.trailing_rewards)},
                      {"stability_ratio_vs_full", optional_number(ratio)},
                      {"variance_reduction_vs_full", optional_number(reduction)}});
    }
    variants.push_back({{"name", name},
                        {"runs", std::move(rows)},
                        {"median_final_success", optional_number(median(successes))},
                        {"median_threshold_step", optional_number(median_threshold(list))},
                        {"median_stability_ratio_vs_full", optional_number(median(ratios))},
                        {"median_variance_reduction_vs_full", optional_number(median(reductions))}});
  }

  ordered_json findings;
  findings["success_threshold"] = success_threshold;
  findings["equal_env_step_budgets"] =
      std::adjacent_find(budgets.begin(), budgets.end(), std::not_equal_to<>()) == budgets.end();
  for (const auto& [name, list] : runs) {
    if (name == "no_interleave") {
      std::vector<double> ratios;
      int higher = 0;
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (const auto r = ratio_vs(list[i], (*full)[i])) ratios.push_back(*r);
        higher += metrics::population_variance(list[i].trailing_rewards) >
                  metrics::population_variance((*full)[i].trailing_rewards);
      }
      const std::optional<double> m = median(ratios);
      findings["median_stability_ratio_stacked_vs_pdit"] = optional_number(m);
      findings["seeds_with_stacked_variance_above_pdit"] = higher;
      findings["stacked_variance_above_pdit_in_majority"] = 2 * higher > static_cast<int>(list.size());
      findings["stability_ratio_above_one"] = m.has_value() && *m > 1.0;
    }
    if (name == "no_clip_align") {
      const std::optional<double> with = median_threshold(*full);
      const std::optional<double> without = median_threshold(list);
      findings["median_threshold_step_with_alignment"] = optional_number(with);
      findings["median_threshold_step_without_alignment"] = optional_number(without);
      findings["alignment_not_slower"] = with && without && std::isfinite(*with) && *with <= *without;
    }
  }

  ordered_json report;
  ordered_json seeds = ordered_json::array();
  for (const VariantRun& r : *full) seeds.push_back(r.seed);
  report["seeds"] = std::move(seeds);
  report["reward_variance_series"] = "trailing training episode rewards, population variance";
  report["variants"] = std::move(variants);
  report["findings"] = std::move(findings);
  return report.dump(2) + "\n";
}

int cmd_ablate(const Options& opts, std::ostream& out) {
  trainer::TrainConfig base = load_config(opts);
  const std::filesystem::path& dir = require_path(opts.out, "--out");
  if (base.model.arch != model::Arch::Pdit) throw ConfigError("arch: ablations start from the pdit architecture");
  base.ablation = {};
  std::vector<std::uint64_t> seeds = base.ablation_seeds;
  if (seeds.empty()) seeds.push_back(base.seed);

  std::vector<std::pair<std::string, std::vector<VariantRun>>> runs;
  for (const char* variant : kVariants) runs.emplace_back(variant, std::vector<VariantRun>{});

  // Seed-major so that a partial report always covers every variant.
  for (std::uint64_t seed : seeds) {
    for (auto& [name, list] : runs) {
      trainer::TrainConfig c = base;
      c.seed = seed;
      c.ablation.no_clip_align = name == "no_clip_align";
      c.ablation.no_interleave = name == "no_interleave";
      c.ablation.no_supervision = name == "no_supervision";
      const trainer::TrainResult r =
          trainer::train(c, dir / name / ("seed_" + std::to_string(seed)));
      list.push_back({seed, r.env_steps, r.parameter_count, r.final_eval.success_rate, r.convergence_step,
                      r.threshold_step, r.trailing_rewards});
      out << name << " seed=" << seed << " success=" << r.final_eval.success_rate << "\n" << std::flush;
    }
    write_file(dir / "ablation_report.json", ablation_report(runs, base.success_threshold));
  }
  out << (dir / "ablation_report.json").string() << "\n";
  return kExitOk;
}

int cmd_replay(const Options& opts, std::ostream& out) {
  const std::filesystem::path& path = require_path(opts.trace, "--trace");
  std::ifstream in(path);
  if (!in) throw CorruptArtifact("trace: cannot read " + path.string());
  std::vector<env::TraceRow> rows;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) rows.push_back(env::trace_from_json(line));
  if (rows.empty()) throw CorruptArtifact("trace: no rows");

  const env::EnvConfig ec = opts.config ? config::load(*opts.config).env : env::EnvConfig{};
  env::GoToLocal world(ec);
  world.reset(rows.front().seed);
  out << "seed " << rows.front().seed << ": " << env::mission_text(world.state().target) << "\n"
      << env::render_ascii(world.state());
  for (const env::TraceRow& row : rows) {
    if (row.seed != rows.front().seed) throw CorruptArtifact("trace: rows mix episode seeds");
    if (world.state().done) throw CorruptArtifact("trace: rows continue past the end of the episode");
    if (row.action < 0 || row.action >= env::kActionCount) throw CorruptArtifact("trace: action out of range");
    const env::StepResult r = world.step(static_cast<env::Action>(row.action));
    const env::WorldState& s = world.state();
    if (s.step_count != row.t || r.reward != row.reward || r.done != row.done || s.agent.x != row.x ||
        s.agent.y != row.y || static_cast<int>(s.heading) != row.heading)
      throw CorruptArtifact("trace: step " + std::to_string(row.t) + " does not match the environment");
    out << "t=" << row.t << " action=" << env::to_string(static_cast<env::Action>(row.action))
        << " reward=" << row.reward << " done=" << (row.done ? "true" : "false") << "\n"
        << env::render_ascii(s);
  }
  return kExitOk;
}

int cmd_gradcheck(const Options& opts, std::ostream& out) {
  std::vector<std::uint64_t> seeds;
  const std::uint64_t first = opts.seed.value_or(0);
  for (std::uint64_t k = 0; k < 5; ++k) seeds.push_back(first + k);
  bool ok = true;
  for (const GradCaseResult& r : run_gradcheck(seeds)) {
    ok = ok && r.passed;
    out << (r.passed ? "ok   " : "FAIL ") << r.name << " seed=" << r.seed
        << " max_rel_error=" << r.report.max_rel_error << " one_sided=" << r.report.one_sided
        << " kink_excluded=" << r.report.kink_crossings << "/" << r.report.coordinates << "\n";
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return ok ? kExitOk : kExitNumeric;
}

int cmd_attn_dump(const Options& opts, std::ostream& out) {
  const checkpoint::Checkpoint ckpt = checkpoint::load(require_path(opts.checkpoint, "--checkpoint"));
  if (ckpt.model.config.arch == model::Arch::Baseline)
    throw ConfigError("arch: the baseline has no attention to dump");
  const std::uint64_t seed = opts.seed.value_or(0);
  env::GoToLocal world(ckpt.env);
  env::Observation obs = world.reset(seed);
  int prev_action = -1, prev_reward = 0;

  ordered_json steps = ordered_json::array();
  for (int t = 0; !world.state().done; ++t) {
    Tape tape;
    const model::BoundParams p(tape, ckpt.model.params, false, false);
    const model::ForwardOutput f = model::forward(p, ckpt.model.config,
                                                  {std::span(&obs, 1), std::span(&prev_action, 1),
                                                   std::span(&prev_reward, 1)},
                                                  {.record_attention = true});
    const Tensor align = model::attention_alignment(f.attention);
    const std::span<const float> logits = f.logits.value().data();
    const auto action = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    ordered_json matrix = ordered_json::array();
    for (std::size_t i = 0; i < model::kMissionTokens; ++i)
      matrix.push_back(std::vector<float>(align.ptr() + i * model::kVisualTokens,
                                          align.ptr() + (i + 1) * model::kVisualTokens));
    steps.push_back({{"t", t}, {"action", action}, {"alignment", std::move(matrix)}});
    const env::StepResult r = world.step(static_cast<env::Action>(action));
    obs = r.observation;
    prev_action = action;
    prev_reward = r.reward > 0.0f ? 1 : 0;
  }

  ordered_json j;
  j["seed"] = seed;
  j["arch"] = std::string(model::to_string(ckpt.model.config.arch));
  j["mission"] = env::mission_text(world.state().target);
  j["shape"] = {model::kMissionTokens, model::kVisualTokens};
  j["steps"] = std::move(steps);
  if (opts.out) {
    write_file(*opts.out, j.dump() + "\n");
    out << opts.out->string() << "\n";
  } else {
    out << j.dump() << "\n";
  }
  return kExitOk;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"pdit-lab: interleaved perception-decision transformer lab"};
  app.require_subcommand(1);
  Options opts;
  std::string seed_text;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config, "JSON config file");
    sub->add_option("--out", opts.out, "output directory or file");
    sub->add_option("--seed", opts.seed, "run or episode seed");
    sub->add_option("--arch", opts.arch, "pdit | stacked | baseline");
    sub->add_option("--episodes", opts.episodes, "evaluation episodes");
    sub->add_option("--checkpoint", opts.checkpoint, "checkpoint file");
    return sub;
  };
  using Cmd = int (*)(const Options&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Cmd>> commands{
      {"train", "train one run", cmd_train},
      {"eval", "greedy evaluation of a checkpoint", cmd_eval},
      {"ablate", "full / no_clip_align / no_interleave / no_supervision over shared seeds", cmd_ablate},
      {"replay", "ASCII replay of an episode trace", cmd_replay},
      {"gradcheck", "finite-difference gradient suite", cmd_gradcheck},
      {"attn-dump", "mission-to-view attention per step as JSON", cmd_attn_dump},
  };
  std::vector<std::pair<CLI::App*, Cmd>> subs;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* sub = add_common(app.add_subcommand(name, help));
    if (std::string(name) == "replay") {
      sub->add_option("trace,--trace", opts.trace, "trace file (JSON lines)");
    }
    subs.emplace_back(sub, fn);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) return fn(opts, out);
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CorruptArtifact& e) {
    err << "corrupt artifact: " << e.what() << "\n";
    return kExitCorrupt;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace pdit::cli
