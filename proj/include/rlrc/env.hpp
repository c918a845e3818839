#pragma once

#include "rlrc/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlrc {

inline constexpr int kNumObjectTypes = 5;
inline constexpr int kNumPlateIds = 5;
inline constexpr int kNumActions = 6;

enum class Split { IND, OOD };

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3, Grasp = 4, Release = 5 };

const char * split_name(Split s);
Split parse_split(const std::string & s);
const char * action_name(Action a);

struct TaskSpec {
    int object_type = 0;
    int plate_id = 0;
    Split split = Split::IND;

    int id() const { return object_type * kNumPlateIds + plate_id; }
    bool operator==(const TaskSpec &) const = default;
};

struct TaskSuite {
    std::vector<TaskSpec> ind;
    std::vector<TaskSpec> ood;
};

// Deterministic 16/9 partition of the 25 (object, plate) pairs in which
// every object type and every plate id occurs at least once in IND.
TaskSuite make_task_suite(std::uint64_t seed);

struct EnvConfig {
    int width = 8;
    int height = 8;
    int max_steps = 64;
    int distractors = 2;
};

// Global token ids shared by the environment and the policy model.
//
//   0                      null / padding
//   [1, 5]                 object types
//   [6, 10]                plate ids
//   [11, 11+W)             x coordinates
//   [.., +H)               y coordinates
//   3 tokens               holding: none / target / other object
//   1 token                begin-of-action marker
//   6 tokens               action ids
struct TokenLayout {
    int width = 8;
    int height = 8;

    static constexpr std::int32_t null_token = 0;
    std::int32_t object_token(int type) const { return 1 + type; }
    std::int32_t plate_token(int id) const { return 1 + kNumObjectTypes + id; }
    std::int32_t x_token(int x) const { return 1 + kNumObjectTypes + kNumPlateIds + x; }
    std::int32_t y_token(int y) const { return x_token(0) + width + y; }
    std::int32_t holding_token(int state) const { return y_token(0) + height + state; }
    std::int32_t action_marker() const { return holding_token(0) + 3; }
    std::int32_t action_token(int a) const { return action_marker() + 1 + a; }
    std::int32_t vocab_size() const { return action_token(0) + kNumActions; }

    // Instruction (2) + gripper (2) + target object (2) + target plate (2)
    // + holding (1) + 2 distractor slots of (type, x, y).
    static constexpr std::size_t observation_length = 15;
};

using Observation = std::vector<std::int32_t>;

struct Cell {
    int x = 0;
    int y = 0;
    bool operator==(const Cell &) const = default;
};

struct ObjectState {
    int type = 0;
    Cell pos;
    bool on_plate = false;
};

struct PlateState {
    int id = 0;
    Cell pos;
};

struct EnvState {
    EnvConfig config;
    TaskSpec task;
    std::uint64_t episode_seed = 0;
    Cell gripper;
    std::optional<std::size_t> holding;  // index into objects
    std::vector<ObjectState> objects;    // objects[0] is the target
    std::vector<PlateState> plates;      // plates[0] is the target
    int t = 0;
    bool target_grasped_once = false;
    bool done = false;
    bool success = false;
};

struct StepResult {
    Observation obs;
    float reward = 0.0f;
    bool done = false;
    bool grasped_now = false;
    bool placed_now = false;
    bool truncated = false;
};

EnvState reset(const TaskSpec & task, std::uint64_t episode_seed, const EnvConfig & config = {});
Observation observe(const EnvState & state);
StepResult step(EnvState & state, Action action);
Action expert_policy(const EnvState & state);
std::string render_ascii(const EnvState & state);

struct DemoStep {
    Observation obs;
    int action = 0;
    bool operator==(const DemoStep &) const = default;
};

struct Demonstration {
    TaskSpec task;
    std::uint64_t seed = 0;
    std::vector<DemoStep> steps;
    bool success = false;
    bool operator==(const Demonstration &) const = default;
};

Demonstration record_expert_episode(const TaskSpec & task, std::uint64_t episode_seed, const EnvConfig & config = {});

// One expert episode per (task, episode index). Throws if any task is OOD.
std::vector<Demonstration> make_demos(std::span<const TaskSpec> tasks, int episodes_per_task, std::uint64_t seed,
                                      const EnvConfig & config = {});
void write_demos(const std::vector<Demonstration> & demos, const std::string & path);
std::vector<Demonstration> read_demos(const std::string & path);
std::vector<Demonstration> generate_demos(std::span<const TaskSpec> tasks, int episodes_per_task, std::uint64_t seed,
                                          const std::string & out_path, const EnvConfig & config = {});

void write_suite(const TaskSuite & suite, const std::string & path);
TaskSuite read_suite(const std::string & path);

// N independent environments stepped in index order. Finished episodes are
// reset immediately with a fresh task and episode seed drawn from the env's
// own stream, so env i never observes env j's randomness.
class VecEnv {
public:
    VecEnv(std::vector<TaskSpec> tasks, std::size_t num_envs, std::uint64_t seed, EnvConfig config = {});

    std::size_t size() const { return states_.size(); }
    const std::vector<TaskSpec> & tasks() const { return tasks_; }
    const EnvState & state(std::size_t i) const { return states_.at(i); }
    // Observations the policy acts on next (post auto-reset).
    std::vector<Observation> observations() const;

    // results[i].obs is the observation right after the step, before any
    // auto-reset.
    std::vector<StepResult> step(std::span<const Action> actions);

    std::uint64_t episodes_started() const { return episodes_started_; }

private:
    void start_episode(std::size_t i);

    std::vector<TaskSpec> tasks_;
    EnvConfig config_;
    std::vector<std::uint64_t> streams_;
    std::vector<EnvState> states_;
    std::uint64_t episodes_started_ = 0;
};

// splitmix64: seed derivation used everywhere an independent stream is
// needed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t next_random(std::uint64_t & state);
// Uniform integer in [0, n) using the top bits of next_random().
std::uint64_t uniform_below(std::uint64_t & state, std::uint64_t n);

}  // namespace rlrc
