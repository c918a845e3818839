#pragma once

#include "rlrc/env.hpp"
#include "rlrc/model.hpp"
#include "rlrc/optim.hpp"
#include "rlrc/quant.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlrc {

// ---- evaluation -----------------------------------------------------------

// Batched policy: one action id per observation.
using PolicyFn = std::function<std::vector<int>(const std::vector<Observation> &)>;

PolicyFn greedy_policy(const PolicyModel & model);
PolicyFn greedy_policy(const QuantizedModel & model);
// Scripted expert acting from observation tokens alone.
PolicyFn expert_observation_policy(const EnvConfig & env = {});

struct EvalResult {
    double success_rate = 0.0;
    double mean_return = 0.0;
    double mean_length = 0.0;
    std::size_t episodes = 0;
};

// Runs episodes_per_task episodes per task, all in lockstep, with episode
// seeds derived from (seed, task, episode index).
EvalResult evaluate(const PolicyFn & policy, std::span<const TaskSpec> tasks, int episodes_per_task,
                    std::uint64_t seed, const EnvConfig & env = {});

// ---- supervised fine-tuning -----------------------------------------------

struct SftSample {
    Observation obs;
    std::vector<int> actions;
};

std::vector<SftSample> flatten_demos(std::span<const Demonstration> demos);

// Mean negative log-likelihood of the demonstrated actions.
Var sft_loss(Tape & tape, const PolicyModel & model, std::span<const SftSample> batch);

struct SftConfig {
    float learning_rate = 3e-4f;
    std::size_t batch_size = 64;
    std::size_t max_steps = 10000;
    std::size_t eval_interval = 250;
    int eval_episodes_per_task = 8;
    // Stop once this many consecutive evals fail to improve on the best
    // (0 disables), or once the best eval reaches target_success.
    std::size_t patience = 0;
    double target_success = 1.01;
    float max_grad_norm = 1.0f;
    std::uint64_t seed = 0;
};

struct SftPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double ind_success = -1.0;  // -1 when not evaluated at this step
};

struct SftResult {
    std::vector<SftPoint> curve;
    std::size_t steps_run = 0;
    std::size_t best_step = 0;
    double best_success = -1.0;
    double final_loss = 0.0;
};

using MetricSink = std::function<void(const nlohmann::json &)>;

// Trains in place and leaves the model at the best-evaluated checkpoint.
// eval_tasks may be empty, in which case no evaluation or selection happens.
SftResult train_sft(PolicyModel & model, std::span<const Demonstration> demos, const SftConfig & config,
                    std::span<const TaskSpec> eval_tasks, const EnvConfig & env = {}, const MetricSink & sink = {});

// ---- PPO --------------------------------------------------------------------

struct PpoConfig {
    float gamma = 0.99f;
    float gae_lambda = 0.95f;
    float clip_eps = 0.2f;
    std::size_t epochs = 4;
    std::size_t minibatches = 4;
    float value_coef = 0.5f;
    float entropy_coef = 0.01f;
    std::size_t num_envs = 16;
    std::size_t horizon = 64;
    std::size_t total_env_steps = 300000;
    float learning_rate = 1e-4f;
    float max_grad_norm = 0.5f;
    bool stop_critic_gradient = false;
    std::size_t eval_interval = 0;  // in updates; 0 = only at the end
    int eval_episodes_per_task = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class EpisodeEnd : std::uint8_t { None = 0, Terminal = 1, Truncated = 2 };

struct Transition {
    Observation obs;
    std::vector<int> actions;
    float log_prob = 0.0f;
    float value = 0.0f;
    float reward = 0.0f;
    EpisodeEnd end = EpisodeEnd::None;
    float terminal_value = 0.0f;  // critic value of the final observation when truncated
    int task_id = 0;
};

// horizon x num_envs grid; transitions[t * num_envs + i] is env i at step t.
struct TrajectoryBuffer {
    std::size_t num_envs = 0;
    std::size_t horizon = 0;
    std::vector<Transition> transitions;
    std::vector<float> bootstrap_values;  // per env, value of the observation after the last step
    std::vector<float> advantages;
    std::vector<float> returns;
    std::size_t successes = 0;
    std::size_t episodes_finished = 0;
};

TrajectoryBuffer collect_rollouts(const PolicyModel & model, const ValueHead & head, VecEnv & env, std::size_t horizon,
                                  std::uint64_t & rng);

struct GaeResult {
    std::vector<float> advantages;
    std::vector<float> returns;
};

// GAE over one environment's time-ordered sequence. Terminal steps bootstrap
// 0; truncated steps bootstrap terminal_values[t]; the last step (if not an
// episode end) bootstraps from `bootstrap`.
GaeResult compute_gae(std::span<const float> rewards, std::span<const float> values, std::span<const EpisodeEnd> ends,
                      std::span<const float> terminal_values, float bootstrap, float gamma, float lambda);
void compute_gae(TrajectoryBuffer & buffer, float gamma, float lambda);

// Population mean 0 / std 1 rescaling.
std::vector<float> normalize_advantages(std::span<const float> advantages);

struct PpoUpdateStats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    double clip_fraction = 0.0;
    double first_minibatch_max_ratio_dev = 0.0;  // max |r - 1| on the first minibatch
};

PpoUpdateStats ppo_update(PolicyModel & model, ValueHead & head, Adam & optimizer, const TrajectoryBuffer & buffer,
                          const PpoConfig & config, std::uint64_t & rng);

struct PpoPoint {
    std::size_t env_steps = 0;
    std::size_t update = 0;
    double rollout_success_rate = 0.0;  // successes / finished episodes in the batch
    PpoUpdateStats stats;
    double ind_success = -1.0;
    double ood_success = -1.0;
};

struct PpoResult {
    std::vector<PpoPoint> curve;
    std::size_t env_steps = 0;
    std::size_t updates = 0;
};

// Trains model + value head in place on the given (IND) tasks. eval_ood is
// only ever evaluated, never stepped for training.
PpoResult train_ppo(PolicyModel & model, ValueHead & head, std::span<const TaskSpec> train_tasks,
                    std::span<const TaskSpec> eval_ood, const PpoConfig & config, const EnvConfig & env = {},
                    const MetricSink & sink = {});

}  // namespace rlrc
