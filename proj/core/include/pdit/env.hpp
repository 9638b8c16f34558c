#pragma once

// GoToLocal-style gridworld: one walled 8x8 room, a handful of coloured
// objects, a templated mission "go to the <color> <type>", an egocentric 7x7
// symbolic view and a binary terminal reward.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pdit::env {

inline constexpr int kGridSize = 8;
inline constexpr int kViewSize = 7;
inline constexpr int kViewChannels = 3;
inline constexpr int kViewCells = kViewSize * kViewSize;
inline constexpr int kDefaultMaxSteps = 64;
inline constexpr int kMissionLength = 5;
inline constexpr int kActionCount = 7;

enum class ObjectType : std::uint8_t { Ball = 0, Key = 1, Box = 2 };
enum class Color : std::uint8_t { Red = 0, Green = 1, Blue = 2, Purple = 3, Yellow = 4, Grey = 5 };
enum class Heading : std::uint8_t { N = 0, E = 1, S = 2, W = 3 };
enum class Action : std::uint8_t { Left = 0, Right = 1, Forward = 2, Pickup = 3, Drop = 4, Toggle = 5, Done = 6 };

inline constexpr int kObjectTypes = 3;
inline constexpr int kColors = 6;

// View cell encoding. 0 in every channel means empty or out of view.
inline constexpr int kViewTypeIds = 5;   // 0 empty/unseen, 1 wall, 2 ball, 3 key, 4 box
inline constexpr int kViewColorIds = 7;  // 0 none, 1 + Color
inline constexpr int kViewStateIds = 1;  // no stateful objects in this room
inline constexpr int kWallTypeId = 1;

constexpr int view_type_id(ObjectType t) { return 2 + static_cast<int>(t); }
constexpr int view_color_id(Color c) { return 1 + static_cast<int>(c); }

std::string_view to_string(ObjectType t);
std::string_view to_string(Color c);
std::string_view to_string(Action a);

struct Position {
  int x = 0;
  int y = 0;
  friend auto operator<=>(const Position&, const Position&) = default;
};

struct Object {
  ObjectType type = ObjectType::Ball;
  Color color = Color::Red;
  Position pos;
  friend bool operator==(const Object&, const Object&) = default;
};

struct Target {
  ObjectType type = ObjectType::Ball;
  Color color = Color::Red;
  friend bool operator==(const Target&, const Target&) = default;
};

struct WorldState {
  int grid_size = kGridSize;
  std::vector<Object> objects;  // objects[0] is the target placed at generation
  Position agent;
  Heading heading = Heading::N;
  Target target;
  int step_count = 0;
  int max_steps = kDefaultMaxSteps;
  std::uint64_t rng_seed = 0;
  bool done = false;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

/// Which instances generate_instance may produce.
struct InstanceFamily {
  int min_distractors = 2;
  int max_distractors = 6;
  /// When > 0, only instances whose oracle distance is at most this value.
  int max_oracle_distance = 0;

  friend bool operator==(const InstanceFamily&, const InstanceFamily&) = default;
};

struct EnvConfig {
  InstanceFamily family;
  int max_steps = kDefaultMaxSteps;
  /// Success pays 1 - 0.9 * steps / max_steps instead of 1.
  bool shaped_reward = false;

  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

using MissionTokens = std::array<int, kMissionLength>;

struct Observation {
  // [row][col][channel], row 0 farthest from the agent; the agent sits at
  // row 6, col 3 looking towards row 0.
  std::array<std::uint8_t, kViewCells * kViewChannels> view{};
  MissionTokens mission{};

  std::uint8_t at(int row, int col, int channel) const {
    return view[static_cast<std::size_t>((row * kViewSize + col) * kViewChannels + channel)];
  }
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct StepResult {
  Observation observation;
  float reward = 0.0f;
  bool done = false;
};

// --- Missions -------------------------------------------------------------

/// Vocabulary: go, to, the, six colours, three object types.
inline constexpr int kVocabSize = 12;

std::string mission_text(const Target& target);
/// Throws InvalidArgument on unknown words or text outside the grammar.
MissionTokens encode_mission(std::string_view text);
std::string decode_mission(std::span<const int> ids);
Target parse_mission(std::span<const int> ids);

// --- Dynamics -------------------------------------------------------------

constexpr std::array<Position, 4> kHeadingDelta{{{0, -1}, {1, 0}, {0, 1}, {-1, 0}}};

Heading turn_left(Heading h);
Heading turn_right(Heading h);
Position front_of(Position p, Heading h);
bool is_interior(Position p, int grid_size = kGridSize);
const Object* object_at(const WorldState& s, Position p);
bool at_goal(const WorldState& s);

/// Deterministic in (seed, family).
WorldState generate_instance(std::uint64_t seed, const InstanceFamily& family = {});
Observation observe(const WorldState& s);
/// Applies one action in place. Throws EnvError on a finished episode.
StepResult step(WorldState& s, Action action, const EnvConfig& config = {});
/// Only rotates/moves; no reward, no step counting. Used by planners.
WorldState apply_motion(const WorldState& s, Action action);

/// Minimal number of {left, right, forward} actions after which the agent
/// faces a matching object; nullopt if unreachable.
std::optional<int> oracle_distance(const WorldState& s);
/// First action of a minimal plan, ties broken by lowest action id.
Action oracle_action(const WorldState& s);

/// Convenience wrapper holding a state and its config.
class GoToLocal {
 public:
  explicit GoToLocal(EnvConfig config = {}) : config_(config) {}

  Observation reset(std::uint64_t seed);
  StepResult step(Action action) { return env::step(state_, action, config_); }

  const WorldState& state() const noexcept { return state_; }
  WorldState& state() noexcept { return state_; }
  const EnvConfig& config() const noexcept { return config_; }

 private:
  EnvConfig config_;
  WorldState state_;
};

std::string render_ascii(const WorldState& s);

// --- Episode traces (JSON lines) ------------------------------------------

struct TraceRow {
  std::uint64_t seed = 0;
  int t = 0;
  int action = 0;
  float reward = 0.0f;
  bool done = false;
  int x = 0;
  int y = 0;
  int heading = 0;
  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

std::string trace_to_json(const TraceRow& row);
/// Throws CorruptArtifact on malformed input.
TraceRow trace_from_json(std::string_view line);

/// Runs an action script from reset(seed) and returns one row per step. The
/// script stops early when the episode ends.
std::vector<TraceRow> run_script(std::uint64_t seed, std::span<const Action> script, const EnvConfig& config = {});

}  // namespace pdit::env
