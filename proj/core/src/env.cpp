#include "pdit/env.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pdit/error.hpp"
#include "pdit/rng.hpp"

namespace pdit::env {
namespace {

constexpr std::array<std::string_view, kObjectTypes> kTypeNames{"ball", "key", "box"};
constexpr std::array<std::string_view, kColors> kColorNames{"red", "green", "blue", "purple", "yellow", "grey"};
constexpr std::array<std::string_view, kActionCount> kActionNames{"left",   "right",  "forward", "pickup",
                                                                   "drop", "toggle", "done"};
constexpr std::array<std::string_view, kVocabSize> kVocab{"go",     "to",     "the",  "red", "green", "blue",
                                                          "purple", "yellow", "grey", "ball", "key",  "box"};
constexpr int kColorToken0 = 3;
constexpr int kTypeToken0 = 9;

}  // namespace

std::string_view to_string(ObjectType t) { return kTypeNames.at(static_cast<std::size_t>(t)); }
std::string_view to_string(Color c) { return kColorNames.at(static_cast<std::size_t>(c)); }
std::string_view to_string(Action a) { return kActionNames.at(static_cast<std::size_t>(a)); }

std::string mission_text(const Target& target) {
  std::string s = "go to the ";
  s += to_string(target.color);
  s += ' ';
  s += to_string(target.type);
  return s;
}

MissionTokens encode_mission(std::string_view text) {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    const auto it = std::find(kVocab.begin(), kVocab.end(), word);
    if (it == kVocab.end()) throw InvalidArgument("unknown mission word '" + word + "'");
    ids.push_back(static_cast<int>(it - kVocab.begin()));
  }
  if (ids.size() != kMissionLength) throw InvalidArgument("mission must have 5 words: '" + std::string(text) + "'");
  MissionTokens out{};
  std::copy(ids.begin(), ids.end(), out.begin());
  parse_mission(out);  // grammar check
  return out;
}

Target parse_mission(std::span<const int> ids) {
  if (ids.size() != kMissionLength) throw InvalidArgument("mission must have 5 tokens");
  for (int id : ids)
    if (id < 0 || id >= kVocabSize) throw InvalidArgument("mission token id out of range: " + std::to_string(id));
  const bool color_ok = ids[3] >= kColorToken0 && ids[3] < kColorToken0 + kColors;
  const bool type_ok = ids[4] >= kTypeToken0 && ids[4] < kTypeToken0 + kObjectTypes;
  if (ids[0] != 0 || ids[1] != 1 || ids[2] != 2 || !color_ok || !type_ok)
    throw InvalidArgument("token sequence does not follow 'go to the <color> <type>'");
  return {static_cast<ObjectType>(ids[4] - kTypeToken0), static_cast<Color>(ids[3] - kColorToken0)};
}

std::string decode_mission(std::span<const int> ids) { return mission_text(parse_mission(ids)); }

Heading turn_left(Heading h) { return static_cast<Heading>((static_cast<int>(h) + 3) % 4); }
Heading turn_right(Heading h) { return static_cast<Heading>((static_cast<int>(h) + 1) % 4); }

Position front_of(Position p, Heading h) {
  const Position d = kHeadingDelta[static_cast<std::size_t>(h)];
  return {p.x + d.x, p.y + d.y};
}

bool is_interior(Position p, int grid_size) {
  return p.x >= 1 && p.y >= 1 && p.x <= grid_size - 2 && p.y <= grid_size - 2;
}

const Object* object_at(const WorldState& s, Position p) {
  for (const Object& o : s.objects)
    if (o.pos == p) return &o;
  return nullptr;
}

bool at_goal(const WorldState& s) {
  const Object* o = object_at(s, front_of(s.agent, s.heading));
  return o != nullptr && o->type == s.target.type && o->color == s.target.color;
}

WorldState apply_motion(const WorldState& s, Action action) {
  WorldState n = s;
  switch (action) {
    case Action::Left:
      n.heading = turn_left(s.heading);
      break;
    case Action::Right:
      n.heading = turn_right(s.heading);
      break;
    case Action::Forward: {
      const Position f = front_of(s.agent, s.heading);
      if (is_interior(f, s.grid_size) && object_at(s, f) == nullptr) n.agent = f;
      break;
    }
    default:
      break;
  }
  return n;
}

namespace {

constexpr int kUnreachable = std::numeric_limits<int>::max() / 2;

// Distance-to-success for every (cell, heading), indexed (y * g + x) * 4 + h.
// The goal test is applied after each action, so a state already facing the
// target still needs one (blocked) forward.
struct DistanceField {
  int grid = kGridSize;
  std::vector<int> dist;
  std::vector<char> blocked;
  std::vector<char> goal;

  int index(int x, int y, int h) const { return (y * grid + x) * 4 + h; }

  // Result of a motion action from (x, y, h).
  void move(int x, int y, int h, int a, int& nx, int& ny, int& nh) const {
    nx = x;
    ny = y;
    nh = h;
    if (a == 0) {
      nh = (h + 3) % 4;
    } else if (a == 1) {
      nh = (h + 1) % 4;
    } else {
      const Position d = kHeadingDelta[static_cast<std::size_t>(h)];
      const int fx = x + d.x, fy = y + d.y;
      if (!blocked[static_cast<std::size_t>(fy * grid + fx)]) {
        nx = fx;
        ny = fy;
      }
    }
  }

  bool faces_goal(int x, int y, int h) const {
    const Position d = kHeadingDelta[static_cast<std::size_t>(h)];
    return goal[static_cast<std::size_t>((y + d.y) * grid + x + d.x)] != 0;
  }

  int cost(int x, int y, int h, int a) const {
    int nx, ny, nh;
    move(x, y, h, a, nx, ny, nh);
    if (faces_goal(nx, ny, nh)) return 1;
    return 1 + dist[static_cast<std::size_t>(index(nx, ny, nh))];
  }

  explicit DistanceField(const WorldState& s) : grid(s.grid_size) {
    const auto cells = static_cast<std::size_t>(grid * grid);
    blocked.assign(cells, 0);
    goal.assign(cells, 0);
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x)
        if (!is_interior({x, y}, grid)) blocked[static_cast<std::size_t>(y * grid + x)] = 1;
    for (const Object& o : s.objects) {
      blocked[static_cast<std::size_t>(o.pos.y * grid + o.pos.x)] = 1;
      if (o.type == s.target.type && o.color == s.target.color)
        goal[static_cast<std::size_t>(o.pos.y * grid + o.pos.x)] = 1;
    }
    dist.assign(cells * 4, kUnreachable);
    for (bool changed = true; changed;) {
      changed = false;
      for (int y = 1; y < grid - 1; ++y)
        for (int x = 1; x < grid - 1; ++x) {
          if (blocked[static_cast<std::size_t>(y * grid + x)]) continue;
          for (int h = 0; h < 4; ++h) {
            int best = kUnreachable;
            for (int a = 0; a < 3; ++a) best = std::min(best, cost(x, y, h, a));
            int& d = dist[static_cast<std::size_t>(index(x, y, h))];
            if (best < d) {
              d = best;
              changed = true;
            }
          }
        }
    }
  }
};

}  // namespace

std::optional<int> oracle_distance(const WorldState& s) {
  const DistanceField field(s);
  const int d = field.dist[static_cast<std::size_t>(field.index(s.agent.x, s.agent.y, static_cast<int>(s.heading)))];
  if (d >= kUnreachable) return std::nullopt;
  return d;
}

Action oracle_action(const WorldState& s) {
  if (s.done) throw EnvError("oracle_action on a finished episode");
  const DistanceField field(s);
  const int x = s.agent.x, y = s.agent.y, h = static_cast<int>(s.heading);
  const int here = field.dist[static_cast<std::size_t>(field.index(x, y, h))];
  if (here >= kUnreachable) throw EnvError("target unreachable");
  for (int a = 0; a < 3; ++a)
    if (field.cost(x, y, h, a) == here) return static_cast<Action>(a);
  throw EnvError("oracle found no improving action");
}

WorldState generate_instance(std::uint64_t seed, const InstanceFamily& family) {
  if (family.min_distractors < 0 || family.max_distractors < family.min_distractors || family.max_distractors > 30)
    throw InvalidArgument("invalid distractor range");
  SplitMix64 rng(seed);
  WorldState s;
  s.rng_seed = seed;
  s.target.type = static_cast<ObjectType>(rng.below(kObjectTypes));
  s.target.color = static_cast<Color>(rng.below(kColors));

  for (;;) {
    s.objects.clear();
    std::vector<Position> free;
    for (int y = 1; y < kGridSize - 1; ++y)
      for (int x = 1; x < kGridSize - 1; ++x) free.push_back({x, y});
    auto take = [&]() {
      const std::size_t i = static_cast<std::size_t>(rng.below(free.size()));
      const Position p = free[i];
      free[i] = free.back();
      free.pop_back();
      return p;
    };
    const int span = family.max_distractors - family.min_distractors + 1;
    const int distractors = family.min_distractors + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    s.objects.push_back({s.target.type, s.target.color, take()});
    for (int i = 0; i < distractors; ++i) {
      const auto type = static_cast<ObjectType>(rng.below(kObjectTypes));
      const auto color = static_cast<Color>(rng.below(kColors));
      s.objects.push_back({type, color, take()});
    }
    s.agent = take();
    s.heading = static_cast<Heading>(rng.below(4));
    const auto d = oracle_distance(s);
    if (d && (family.max_oracle_distance <= 0 || *d <= family.max_oracle_distance)) return s;
  }
}

Observation observe(const WorldState& s) {
  Observation obs;
  const Position fwd = kHeadingDelta[static_cast<std::size_t>(s.heading)];
  const Position right = kHeadingDelta[static_cast<std::size_t>(turn_right(s.heading))];
  for (int row = 0; row < kViewSize; ++row)
    for (int col = 0; col < kViewSize; ++col) {
      const int f = kViewSize - 1 - row;
      const int r = col - kViewSize / 2;
      const Position p{s.agent.x + f * fwd.x + r * right.x, s.agent.y + f * fwd.y + r * right.y};
      auto* cell = &obs.view[static_cast<std::size_t>((row * kViewSize + col) * kViewChannels)];
      if (p.x < 0 || p.y < 0 || p.x >= s.grid_size || p.y >= s.grid_size) continue;
      if (!is_interior(p, s.grid_size)) {
        cell[0] = kWallTypeId;
        continue;
      }
      if (const Object* o = object_at(s, p)) {
        cell[0] = static_cast<std::uint8_t>(view_type_id(o->type));
        cell[1] = static_cast<std::uint8_t>(view_color_id(o->color));
      }
    }
  obs.mission = encode_mission(mission_text(s.target));
  return obs;
}

StepResult step(WorldState& s, Action action, const EnvConfig& config) {
  if (s.done) throw EnvError("step on a finished episode");
  if (static_cast<int>(action) < 0 || static_cast<int>(action) >= kActionCount)
    throw InvalidArgument("action id out of range");
  const WorldState moved = apply_motion(s, action);
  s.agent = moved.agent;
  s.heading = moved.heading;
  ++s.step_count;

  StepResult r;
  if (action == Action::Done) {
    s.done = true;
  } else if (at_goal(s)) {
    s.done = true;
    r.reward = config.shaped_reward
                   ? 1.0f - 0.9f * static_cast<float>(s.step_count) / static_cast<float>(s.max_steps)
                   : 1.0f;
  } else if (s.step_count >= s.max_steps) {
    s.done = true;
  }
  r.done = s.done;
  r.observation = observe(s);
  return r;
}

Observation GoToLocal::reset(std::uint64_t seed) {
  state_ = generate_instance(seed, config_.family);
  state_.max_steps = config_.max_steps;
  return observe(state_);
}

std::string render_ascii(const WorldState& s) {
  static constexpr std::array<char, 4> kArrow{'^', '>', 'v', '<'};
  std::string out;
  for (int y = 0; y < s.grid_size; ++y) {
    for (int x = 0; x < s.grid_size; ++x) {
      const Position p{x, y};
      if (!is_interior(p, s.grid_size)) {
        out += "##";
      } else if (p == s.agent) {
        out += kArrow[static_cast<std::size_t>(s.heading)];
        out += kArrow[static_cast<std::size_t>(s.heading)];
      } else if (const Object* o = object_at(s, p)) {
        out += static_cast<char>(std::toupper(to_string(o->color)[0]));
        out += to_string(o->type)[0];
      } else {
        out += "  ";
      }
    }
    out += '\n';
  }
  return out;
}

std::string trace_to_json(const TraceRow& row) {
  nlohmann::ordered_json j;
  j["seed"] = row.seed;
  j["t"] = row.t;
  j["action"] = row.action;
  j["reward"] = row.reward;
  j["done"] = row.done;
  j["agent"] = {row.x, row.y, row.heading};
  return j.dump();
}

TraceRow trace_from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    TraceRow r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.t = j.at("t").get<int>();
    r.action = j.at("action").get<int>();
    r.reward = j.at("reward").get<float>();
    r.done = j.at("done").get<bool>();
    const auto& a = j.at("agent");
    if (!a.is_array() || a.size() != 3) throw CorruptArtifact("trace agent must be [x, y, h]");
    r.x = a[0].get<int>();
    r.y = a[1].get<int>();
    r.heading = a[2].get<int>();
    if (r.action < 0 || r.action >= kActionCount || r.heading < 0 || r.heading > 3)
      throw CorruptArtifact("trace row out of range");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptArtifact(std::string("malformed trace row: ") + e.what());
  }
}

std::vector<TraceRow> run_script(std::uint64_t seed, std::span<const Action> script, const EnvConfig& config) {
  GoToLocal env(config);
  env.reset(seed);
  std::vector<TraceRow> rows;
  for (Action a : script) {
    const StepResult r = env.step(a);
    const WorldState& s = env.state();
    rows.push_back({seed, s.step_count, static_cast<int>(a), r.reward, r.done, s.agent.x, s.agent.y,
                    static_cast<int>(s.heading)});
    if (r.done) break;
  }
  return rows;
}

}  // namespace pdit::env
