// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance --criteria 1,2,3,4,5,6 --work <dir>
//   acceptance --emit-traces            (child mode used by criterion 4)

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "pdit/env.hpp"
#include "pdit/error.hpp"
#include "pdit/losses.hpp"
#include "pdit/rng.hpp"
#include "pdit/trainer.hpp"
#include "pdit_cli/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace pdit::acceptance {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int precision = 3) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

// Runs a shell command and returns its stdout with the exit status.
std::pair<int, std::string> capture(const std::string& command) {
  std::string out;
  FILE* pipe = popen(command.c_str(), "r");
  if (pipe == nullptr) return {-1, out};
  std::array<char, 4096> buf;
  while (const std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

float uniform(SplitMix64& rng, float lo, float hi) { return lo + (hi - lo) * static_cast<float>(rng.uniform()); }

// --- 1: gradient suite -------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const std::vector<cli::GradCaseResult> results = cli::run_gradcheck({0, 1, 2, 3, 4});
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t failed = 0;
  std::set<std::string> names;
  for (const cli::GradCaseResult& r : results) {
    names.insert(r.name);
    failed += !r.passed;
    if (r.report.max_rel_error >= worst) {
      worst = r.report.max_rel_error;
      worst_name = r.name;
    }
  }
  const bool has_model = names.contains("model_pdit");
  return {failed == 0 && worst < 1e-3 && elapsed < 60.0 && has_model,
          std::to_string(names.size()) + " cases x 5 seeds, max rel error " + fmt(worst) + " (" + worst_name + "), " +
              std::to_string(failed) + " failed, " + fmt(elapsed) + " s"};
}

// --- 2: closed forms -----------------------------------------------------------

Outcome closed_forms() {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  {
    Tape tape;
    for (std::size_t n : {2u, 4u, 16u, 64u}) {
      Tensor v({n, 5}), t({n, 5});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
          v[i * 5 + k] = 1.0f + float(k);
          t[i * 5 + k] = 2.0f - float(k);
        }
      const float loss = losses::infonce_loss(tape.constant(v), tape.constant(t), 0.1f).value().item();
      check(std::abs(loss - std::log(double(n))) <= 1e-6, "infonce ln " + std::to_string(n));
    }
  }
  {
    Tape tape;
    const Var logits = tape.constant(Tensor({4, 7}, 0.3f));
    check(std::abs(losses::entropy(logits).value().item() - std::log(7.0)) <= 1e-6, "entropy ln 7");
    const std::vector<int> oracle{0, 2, 4, 6};
    check(std::abs(losses::imitation_loss(logits, oracle).value().item() - std::log(7.0)) <= 1e-6, "imitation ln 7");
  }
  auto surrogate = [](float ratio, float adv, float* grad) {
    Tape tape;
    const std::vector<float> old{0.0f}, a{adv};
    const Var x = tape.leaf(Tensor({1}, std::vector<float>{std::log(ratio)}), true);
    const Var loss = losses::ppo_clip_loss(x, old, a, 0.2f, false);
    backward(loss);
    *grad = tape.grad_of(x)[0];
    return -loss.value().item();
  };
  float g = 0.0f;
  check(surrogate(1.5f, 1.0f, &g) == 1.2f, "ppo r=1.5 A=+1 gives 1.2");
  check(g == 0.0f, "clip gradient r=1.5 A=+1");
  check(surrogate(0.5f, -1.0f, &g) == -0.8f, "ppo r=0.5 A=-1 gives -0.8");
  check(g == 0.0f, "clip gradient r=0.5 A=-1");
  std::string detail = "infonce ln N, entropy/imitation ln 7, ppo 1.2/-0.8, clip-region gradient 0";
  for (const std::string& b : bad) detail += "; failed: " + b;
  return {bad.empty(), detail};
}

// --- 3: oracles ----------------------------------------------------------------

Outcome oracle_agreement() {
  double gae_err = 0.0;
  SplitMix64 rng(31337);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    std::vector<float> r(n), v(n);
    oracles::Flags d(n);
    for (std::size_t t = 0; t < n; ++t) {
      r[t] = rng.below(5) == 0 ? uniform(rng, 0.1f, 1.0f) : 0.0f;
      v[t] = uniform(rng, -1, 1);
      d.data[t] = rng.below(8) == 0;
    }
    const float boot = uniform(rng, -1, 1), gamma = uniform(rng, 0.8f, 1.0f), lambda = uniform(rng, 0.0f, 1.0f);
    const losses::Advantages a = losses::gae(r, v, d.span(), boot, gamma, lambda);
    const std::vector<double> o = oracles::brute_force_gae(r, v, d.span(), boot, gamma, lambda);
    for (std::size_t t = 0; t < n; ++t) gae_err = std::max(gae_err, std::abs(a.advantages[t] - o[t]));
  }

  double nce_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(31), d = 2 + rng.below(15);
    Tensor v({n, d}), t({n, d});
    for (float& x : v.data()) x = uniform(rng, -1, 1);
    for (float& x : t.data()) x = uniform(rng, -1, 1);
    Tape tape;
    const float loss = losses::infonce_loss(tape.constant(v), tape.constant(t), 1.0f).value().item();
    nce_err = std::max(nce_err, std::abs(loss - oracles::brute_force_infonce(v, t, 1.0)));
  }

  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const env::WorldState s = env::generate_instance(seed);
    const std::optional<int> d = env::oracle_distance(s);
    mismatches += !d || *d != oracles::bfs_distance(s);
  }
  return {gae_err <= 1e-5 && nce_err <= 1e-6 && mismatches == 0,
          "gae max err " + fmt(gae_err) + " over 1000 sequences, infonce max err " + fmt(nce_err) +
              " over 100 batches, bfs mismatches " + std::to_string(mismatches) + "/200"};
}

// --- 4: determinism --------------------------------------------------------------

// 100 (seed, script) pairs rendered as trace lines.
std::string emit_traces() {
  std::string out;
  SplitMix64 rng(4);
  for (int k = 0; k < 100; ++k) {
    const std::uint64_t seed = rng.next();
    std::vector<env::Action> script(1 + rng.below(80));
    for (env::Action& a : script) a = static_cast<env::Action>(rng.below(env::kActionCount));
    for (const env::TraceRow& row : env::run_script(seed, script)) out += env::trace_to_json(row) + "\n";
  }
  return out;
}

Outcome determinism(const fs::path& work) {
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  const auto [s1, a] = capture(quote(self) + " --emit-traces");
  const auto [s2, b] = capture(quote(self) + " --emit-traces");
  const bool traces_ok = s1 == 0 && s2 == 0 && !a.empty() && a == b && a == emit_traces();

  const fs::path dir = work / "c4";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "config.json";
  std::ofstream(config) << R"({"arch":"pdit","seed":11,"total_env_steps":2048,"n_envs":4,"n_steps":128,)"
                        << R"("minibatch":128,"epochs_per_update":2,"checkpoint_every":2,)"
                        << R"("model":{"hidden_dim":16,"interleave_pairs":2,"mission_embed_dim":16},)"
                        << R"("eval":{"every":2,"episodes":10}})";
  const std::string exe = PDIT_LAB_EXE;
  const int r1 = std::system(("PDIT_NUM_WORKERS=1 " + quote(exe) + " train --config " + quote(config) + " --out " +
                              quote(dir / "run1") + " > /dev/null")
                                 .c_str());
  const int r2 = std::system(("PDIT_NUM_WORKERS=3 " + quote(exe) + " train --config " + quote(config) + " --out " +
                              quote(dir / "run2") + " > /dev/null")
                                 .c_str());
  const std::string m1 = slurp(dir / "run1" / "metrics.jsonl"), m2 = slurp(dir / "run2" / "metrics.jsonl");
  const std::size_t rows = static_cast<std::size_t>(std::count(m1.begin(), m1.end(), '\n'));
  const bool metrics_ok = r1 == 0 && r2 == 0 && rows == 4 && m1 == m2 &&
                          slurp(dir / "run1" / "eval.json") == slurp(dir / "run2" / "eval.json");
  return {traces_ok && metrics_ok,
          std::string("100 scripted episodes ") + (traces_ok ? "identical" : "DIFFER") +
              " across two processes; metrics.jsonl (" + std::to_string(rows) + " rows) " +
              (metrics_ok ? "byte-identical" : "DIFFERS") + " across two training processes"};
}

// --- 5: gradient coupling ----------------------------------------------------------

Outcome gradient_coupling() {
  trainer::TrainConfig c;
  c.loss.lambda1 = 0.0f;
  c.loss.lambda2 = 0.0f;
  c.n_steps = 32;
  const model::Model m{c.model, model::init_params(c.model, derive_seed(c.seed, 1))};
  auto workers = trainer::make_workers(c);
  trainer::RolloutBuffer b = trainer::collect_rollouts(m, workers, c.n_steps);
  trainer::compute_advantages(b, c.loss);
  std::vector<std::size_t> idx(static_cast<std::size_t>(c.minibatch));
  std::iota(idx.begin(), idx.end(), 0);
  const trainer::GradientNorms live = trainer::gradient_norms(m, b, idx, c, false);
  const trainer::GradientNorms frozen = trainer::gradient_norms(m, b, idx, c, true);
  return {live.perception > 0.0 && frozen.perception == 0.0 && frozen.decision > 0.0,
          "lambda1 = lambda2 = 0: |dL/dtheta_P| = " + fmt(live.perception) +
              ", frozen encoder |dL/dtheta_P| = " + fmt(frozen.perception) +
              ", |dL/dtheta_D| = " + fmt(frozen.decision)};
}

// --- 6: baseline on the reduced family ---------------------------------------------

Outcome baseline_desk(const fs::path& work) {
  const fs::path dir = work / "c6";
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const int rc = std::system(("PDIT_NUM_WORKERS=1 " + quote(PDIT_LAB_EXE) + " train --config " +
                              quote(fs::path(PDIT_SOURCE_DIR) / "configs" / "desk_baseline.json") + " --out " +
                              quote(dir) + " > /dev/null")
                                 .c_str());
  const double minutes = seconds_since(t0) / 60.0;
  if (rc != 0) return {false, "pdit-lab train exited with status " + std::to_string(rc)};
  const json e = json::parse(slurp(dir / "eval.json"));
  const bool reached = e["threshold_step"].is_number() && e["threshold_step"].get<std::uint64_t>() <= 300'000;
  return {reached && minutes < 45.0,
          "success >= 0.8 at env step " + e["threshold_step"].dump() + ", final success " +
              fmt(e["final_eval"]["success_rate"].get<double>()) + " after " + e["env_steps"].dump() +
              " steps, " + fmt(minutes) + " min on 1 worker"};
}

// --- 7: ablation findings -----------------------------------------------------------

Outcome ablation_desk(const fs::path& work) {
  const fs::path dir = work / "c7";
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const int rc = std::system(("PDIT_NUM_WORKERS=1 " + quote(PDIT_LAB_EXE) + " ablate --config " +
                              quote(fs::path(PDIT_SOURCE_DIR) / "configs" / "desk_pdit.json") + " --out " +
                              quote(dir) + " > " + quote(dir.string() + ".log"))
                                 .c_str());
  const double hours = seconds_since(t0) / 3600.0;
  const std::string text = slurp(dir / "ablation_report.json");
  if (rc != 0 || text.empty())
    return {false, "pdit-lab ablate exited with status " + std::to_string(rc) + ", report " +
                       (text.empty() ? "missing" : "present")};
  const json f = json::parse(text)["findings"];
  const bool ratio_ok = f["stability_ratio_above_one"].get<bool>();
  const bool align_ok = f["alignment_not_slower"].get<bool>();
  return {ratio_ok && align_ok && hours <= 8.0,
          "median stability_ratio(stacked, pdit) " + f["median_stability_ratio_stacked_vs_pdit"].dump() +
              ", median threshold step with/without alignment " + f["median_threshold_step_with_alignment"].dump() +
              "/" + f["median_threshold_step_without_alignment"].dump() + ", " + fmt(hours) + " h"};
}

}  // namespace
}  // namespace pdit::acceptance

int main(int argc, char** argv) {
  using namespace pdit::acceptance;
  std::set<int> selected;
  fs::path work = fs::temp_directory_path() / "pdit_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--emit-traces") {
      std::cout << emit_traces();
      return 0;
    }
    if (arg == "--criteria" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
    } else if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--criteria 1,2,...] [--work DIR] | --emit-traces\n";
      return 2;
    }
  }
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6};
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"closed forms", closed_forms},
      {"oracle agreement", oracle_agreement},
      {"determinism", [&] { return determinism(work); }},
      {"gradient coupling", gradient_coupling},
      {"baseline reaches 0.8 on the reduced family", [&] { return baseline_desk(work); }},
      {"ablation findings", [&] { return ablation_desk(work); }},
  };
  int failures = 0;
  for (int k : selected) {
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::cerr << "unknown criterion " << k << "\n";
      return 2;
    }
    const auto& [name, fn] = criteria[static_cast<std::size_t>(k - 1)];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << name << "): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
