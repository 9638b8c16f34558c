#include "pdit/config.hpp"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "pdit/error.hpp"

namespace pdit::config {
namespace {

using nlohmann::json;

// Reads fields of one JSON object, rejecting unknown keys and wrong types.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where(key) + "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(where(key) + "expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(where(key) + "must be >= 0");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + e.what());
    }
  }

  Reader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError(path_ + k + ": unknown field");
  }

  std::string where(const std::string& key) const { return path_ + key + ": "; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json model_json(const model::ModelConfig& m) {
  return {{"hidden_dim", m.hidden_dim},
          {"heads", m.heads},
          {"interleave_pairs", m.interleave_pairs},
          {"mission_embed_dim", m.mission_embed_dim},
          {"mlp_ratio", m.mlp_ratio},
          {"conv_kernel", m.conv_kernel},
          {"conv_stride", m.conv_stride},
          {"conv_padding", m.conv_padding},
          {"action_count", m.action_count},
          {"baseline_channels", m.baseline_channels}};
}

void read_model(Reader r, model::ModelConfig& m) {
  r.get("hidden_dim", m.hidden_dim);
  r.get("heads", m.heads);
  r.get("interleave_pairs", m.interleave_pairs);
  r.get("mission_embed_dim", m.mission_embed_dim);
  r.get("mlp_ratio", m.mlp_ratio);
  r.get("conv_kernel", m.conv_kernel);
  r.get("conv_stride", m.conv_stride);
  r.get("conv_padding", m.conv_padding);
  r.get("action_count", m.action_count);
  r.get("baseline_channels", m.baseline_channels);
  r.finish();
}

json env_json(const env::EnvConfig& e) {
  return {{"max_steps", e.max_steps},
          {"shaped_reward", e.shaped_reward},
          {"min_distractors", e.family.min_distractors},
          {"max_distractors", e.family.max_distractors},
          {"max_oracle_distance", e.family.max_oracle_distance}};
}

void read_env(Reader r, env::EnvConfig& e) {
  r.get("max_steps", e.max_steps);
  r.get("shaped_reward", e.shaped_reward);
  r.get("min_distractors", e.family.min_distractors);
  r.get("max_distractors", e.family.max_distractors);
  r.get("max_oracle_distance", e.family.max_oracle_distance);
  r.finish();
}

json parse(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
}

}  // namespace

std::string to_json(const trainer::TrainConfig& c) {
  json j;
  j["arch"] = std::string(model::to_string(c.model.arch));
  j["seed"] = c.seed;
  j["total_env_steps"] = c.total_env_steps;
  j["n_envs"] = c.n_envs;
  j["n_steps"] = c.n_steps;
  j["minibatch"] = c.minibatch;
  j["epochs_per_update"] = c.epochs_per_update;
  j["lr"] = c.lr;
  j["max_grad_norm"] = c.max_grad_norm;
  j["normalize_advantages"] = c.normalize_advantages;
  j["dedupe_missions"] = c.dedupe_missions;
  j["checkpoint_every"] = c.checkpoint_every;
  j["variance_window"] = c.variance_window;
  j["success_threshold"] = c.success_threshold;
  j["log_wall_time"] = c.log_wall_time;
  j["ablation_seeds"] = c.ablation_seeds;
  j["model"] = model_json(c.model);
  j["env"] = env_json(c.env);
  j["loss"] = {{"lambda1", c.loss.lambda1},           {"lambda2", c.loss.lambda2},
               {"value_coef", c.loss.value_coef},     {"entropy_coef", c.loss.entropy_coef},
               {"clip_epsilon", c.loss.clip_epsilon}, {"gamma", c.loss.gamma},
               {"gae_lambda", c.loss.gae_lambda},     {"infonce_tau", c.loss.infonce_tau}};
  j["ablation"] = {{"no_clip_align", c.ablation.no_clip_align},
                   {"no_interleave", c.ablation.no_interleave},
                   {"no_supervision", c.ablation.no_supervision}};
  j["pretrain"] = {
      {"enabled", c.pretrain.enabled}, {"batch", c.pretrain.batch}, {"lr", c.pretrain.lr}, {"steps", c.pretrain.steps}};
  j["eval"] = {{"every", c.eval.every}, {"episodes", c.eval.episodes}, {"seed_base", c.eval.seed_base}};
  return j.dump(2) + "\n";
}

trainer::TrainConfig from_json(std::string_view text) {
  const json j = parse(text);
  trainer::TrainConfig c;
  Reader r(j, "");
  std::string arch(model::to_string(c.model.arch));
  r.get("arch", arch);
  c.model.arch = model::parse_arch(arch);
  r.get("seed", c.seed);
  r.get("total_env_steps", c.total_env_steps);
  r.get("n_envs", c.n_envs);
  r.get("n_steps", c.n_steps);
  r.get("minibatch", c.minibatch);
  r.get("epochs_per_update", c.epochs_per_update);
  r.get("lr", c.lr);
  r.get("max_grad_norm", c.max_grad_norm);
  r.get("normalize_advantages", c.normalize_advantages);
  r.get("dedupe_missions", c.dedupe_missions);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("variance_window", c.variance_window);
  r.get("success_threshold", c.success_threshold);
  r.get("log_wall_time", c.log_wall_time);
  if (r.has("ablation_seeds")) {
    const json& seeds = r.raw("ablation_seeds");
    if (!seeds.is_array()) throw ConfigError("ablation_seeds: expected an array of integers");
    c.ablation_seeds.clear();
    for (const json& s : seeds) {
      if (!s.is_number_unsigned()) throw ConfigError("ablation_seeds: expected non-negative integers");
      c.ablation_seeds.push_back(s.get<std::uint64_t>());
    }
  }
  read_model(r.child("model"), c.model);
  read_env(r.child("env"), c.env);
  {
    Reader l = r.child("loss");
    l.get("lambda1", c.loss.lambda1);
    l.get("lambda2", c.loss.lambda2);
    l.get("value_coef", c.loss.value_coef);
    l.get("entropy_coef", c.loss.entropy_coef);
    l.get("clip_epsilon", c.loss.clip_epsilon);
    l.get("gamma", c.loss.gamma);
    l.get("gae_lambda", c.loss.gae_lambda);
    l.get("infonce_tau", c.loss.infonce_tau);
    l.finish();
  }
  {
    Reader a = r.child("ablation");
    a.get("no_clip_align", c.ablation.no_clip_align);
    a.get("no_interleave", c.ablation.no_interleave);
    a.get("no_supervision", c.ablation.no_supervision);
    a.finish();
  }
  {
    Reader p = r.child("pretrain");
    p.get("enabled", c.pretrain.enabled);
    p.get("batch", c.pretrain.batch);
    p.get("lr", c.pretrain.lr);
    p.get("steps", c.pretrain.steps);
    p.finish();
  }
  {
    Reader e = r.child("eval");
    e.get("every", c.eval.every);
    e.get("episodes", c.eval.episodes);
    e.get("seed_base", c.eval.seed_base);
    e.finish();
  }
  r.finish();
  c.validate();
  return c;
}

trainer::TrainConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string model_to_json(const model::ModelConfig& c) {
  json j = model_json(c);
  j["arch"] = std::string(model::to_string(c.arch));
  return j.dump();
}

model::ModelConfig model_from_json(std::string_view text) {
  const json j = parse(text);
  model::ModelConfig c;
  std::string arch(model::to_string(c.arch));
  json rest = j;
  if (rest.contains("arch")) {
    if (!rest["arch"].is_string()) throw ConfigError("model.arch: expected a string");
    arch = rest["arch"].get<std::string>();
    rest.erase("arch");
  }
  c.arch = model::parse_arch(arch);
  read_model(Reader(rest, "model."), c);
  c.validate();
  return c;
}

std::string env_to_json(const env::EnvConfig& c) { return env_json(c).dump(); }

env::EnvConfig env_from_json(std::string_view text) {
  env::EnvConfig c;
  read_env(Reader(parse(text), "env."), c);
  return c;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pdit::config
