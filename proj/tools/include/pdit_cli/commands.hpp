#pragma once

// pdit-lab subcommands. Each returns a process exit code and never prompts.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pdit/trainer.hpp"

namespace pdit::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitCorrupt = 4,
};

struct Options {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> trace;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> arch;
  std::optional<int> episodes;
};

/// Config file (or defaults) with --seed/--arch overrides applied.
trainer::TrainConfig load_config(const Options& opts);

int cmd_train(const Options& opts, std::ostream& out);
int cmd_eval(const Options& opts, std::ostream& out);
int cmd_ablate(const Options& opts, std::ostream& out);
int cmd_replay(const Options& opts, std::ostream& out);
int cmd_gradcheck(const Options& opts, std::ostream& out);
int cmd_attn_dump(const Options& opts, std::ostream& out);

/// Full command line entry point (argv[1] is the subcommand). Library errors
/// map to exit codes; the message goes to `err`.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

// --- Ablation report ---------------------------------------------------------

inline constexpr const char* kVariants[] = {"full", "no_clip_align", "no_interleave", "no_supervision"};

struct VariantRun {
  std::uint64_t seed = 0;
  std::uint64_t env_steps = 0;
  std::size_t parameter_count = 0;
  double final_success = 0.0;
  std::optional<std::uint64_t> convergence_step;
  std::optional<std::uint64_t> threshold_step;
  std::vector<double> trailing_rewards;
};

/// Builds ablation_report.json from per-variant runs keyed by variant name,
/// each list in seed order.
std::string ablation_report(const std::vector<std::pair<std::string, std::vector<VariantRun>>>& runs,
                            double success_threshold);

}  // namespace pdit::cli
