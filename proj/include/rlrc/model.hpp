#pragma once

#include "rlrc/autodiff.hpp"
#include "rlrc/env.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace rlrc {

struct ModelConfig {
    std::size_t d_model = 128;
    std::size_t n_layers = 6;
    std::size_t n_heads = 4;  // base head count; head_dim = d_model / n_heads
    std::size_t d_ff = 512;
    // Per-layer interior widths. Empty means "all layers at the base width";
    // pruning fills them in.
    std::vector<std::size_t> layer_heads;
    std::vector<std::size_t> layer_d_ff;

    std::size_t instruction_vocab = kNumObjectTypes + kNumPlateIds;
    std::size_t observation_vocab = 8 + 8 + 3;
    std::size_t action_vocab = kNumActions;
    std::size_t tokens_per_action = 1;
    std::size_t max_seq_len = 32;
    float norm_eps = 1e-5f;
    std::uint64_t seed = 0;

    static ModelConfig for_env(const EnvConfig & env);

    std::size_t head_dim() const { return n_heads ? d_model / n_heads : 0; }
    std::size_t heads(std::size_t layer) const { return layer_heads.empty() ? n_heads : layer_heads.at(layer); }
    std::size_t ff(std::size_t layer) const { return layer_d_ff.empty() ? d_ff : layer_d_ff.at(layer); }

    // Token id layout: [null][instruction][observation][marker][actions]
    std::size_t vocab_size() const { return 1 + instruction_vocab + observation_vocab + 1 + action_vocab; }
    std::int32_t action_marker() const { return static_cast<std::int32_t>(1 + instruction_vocab + observation_vocab); }
    std::int32_t action_token(std::size_t a) const { return action_marker() + 1 + static_cast<std::int32_t>(a); }

    // Fills per-layer width vectors and checks every invariant.
    void normalize();
    void validate() const;
};

nlohmann::json config_to_json(const ModelConfig & c);
ModelConfig config_from_json(const nlohmann::json & j);

struct DecoderLayer {
    Tensor attn_norm;  // [d]
    Tensor wq;         // [d x heads*head_dim]
    Tensor wk;
    Tensor wv;
    Tensor wo;         // [heads*head_dim x d]
    Tensor mlp_norm;   // [d]
    Tensor w_gate;     // [d x ff]
    Tensor w_up;       // [d x ff]
    Tensor w_down;     // [ff x d]
};

enum class Proj { Q, K, V, O, Gate, Up, Down };
inline constexpr Proj kAllProjs[] = {Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down};
const char * proj_name(Proj p);
Tensor & layer_weight(DecoderLayer & layer, Proj p);
const Tensor & layer_weight(const DecoderLayer & layer, Proj p);

struct PolicyModel {
    ModelConfig config;
    Tensor tok_emb;      // [vocab x d]
    Tensor pos_emb;      // [max_seq x d]
    std::vector<DecoderLayer> layers;
    Tensor final_norm;   // [d]
    Tensor action_head;  // [d x action_vocab]

    std::vector<std::pair<std::string, Tensor *>> named_parameters();
    std::vector<std::pair<std::string, const Tensor *>> named_parameters() const;
    std::vector<Tensor *> parameters();
    std::size_t parameter_count() const;
    void set_requires_grad(bool on);
};

struct ValueHead {
    static constexpr std::size_t hidden = 64;
    Tensor w1;  // [d x 64]
    Tensor b1;  // [64]
    Tensor w2;  // [64 x 1]
    Tensor b2;  // [1]

    std::vector<std::pair<std::string, Tensor *>> named_parameters();
    std::vector<std::pair<std::string, const Tensor *>> named_parameters() const;
    std::vector<Tensor *> parameters();
};

PolicyModel init_model(ModelConfig config, std::uint64_t seed);
ValueHead init_value_head(std::size_t d_model, std::uint64_t seed);

// Closed-form parameter count for a config (no model needed).
std::size_t config_parameter_count(const ModelConfig & config);

// Fixed-length packed token sequences: row b*seq + t is position t of b.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;

    static TokenBatch from_rows(const std::vector<std::vector<std::int32_t>> & rows);
};

// Supplies the seven decoder projections; lets a quantized model reuse the
// same forward pass with a different weight storage.
class Projector {
public:
    virtual ~Projector() = default;
    virtual Var project(Tape & tape, Var x, std::size_t layer, Proj p) const = 0;
};

struct ForwardResult {
    Var logits;  // [rows x action_vocab]
    Var hidden;  // [rows x d_model], final-block output after the final norm
};

// Runs the decoder. If rows is non-empty only those packed rows are passed
// through the final norm and action head.
ForwardResult forward(Tape & tape, const PolicyModel & model, const TokenBatch & tokens,
                      std::span<const std::size_t> rows = {});
ForwardResult forward_with(Tape & tape, const PolicyModel & model, const Projector & projector,
                           const TokenBatch & tokens, std::span<const std::size_t> rows = {});

// observation tokens + marker + (optional) earlier action tokens
std::vector<std::int32_t> build_context(const ModelConfig & config, std::span<const std::int32_t> observation,
                                        std::span<const int> actions = {});

struct SampleMode {
    bool greedy = true;
    float temperature = 1.0f;

    static SampleMode Greedy() { return {true, 1.0f}; }
    static SampleMode Stochastic(float temperature = 1.0f) { return {false, temperature}; }
};

struct SampledAction {
    std::vector<int> actions;  // K action ids in [0, action_vocab)
    float log_prob = 0.0f;     // sum of per-token log-softmax at temperature 1
};

// Autoregressively samples K action tokens for each observation. rng is a
// splitmix64 state advanced once per stochastic draw. With a Projector the
// decoder projections come from it (e.g. a quantized model).
std::vector<SampledAction> sample_actions(const PolicyModel & model, const std::vector<Observation> & observations,
                                          SampleMode mode, std::uint64_t & rng, const Projector * projector = nullptr);
SampledAction sample_action(const PolicyModel & model, const Observation & observation, SampleMode mode,
                            std::uint64_t & rng);

struct ActorCriticStep {
    std::vector<int> actions;
    std::vector<float> log_probs;
    std::vector<float> values;
};

// Single-token (K = 1) action sampling plus critic value from one shared
// forward pass; used for rollout collection.
ActorCriticStep act(const PolicyModel & model, const ValueHead & head, const std::vector<Observation> & observations,
                    SampleMode mode, std::uint64_t & rng);

// Log-probability of K action ids per observation -> Var [B].
Var action_logprob(Tape & tape, const PolicyModel & model, const std::vector<Observation> & observations,
                   const std::vector<std::vector<int>> & actions);
float action_logprob(const PolicyModel & model, const Observation & observation, const std::vector<int> & actions);

// Critic: value head applied to the final-block hidden state at the
// begin-of-action marker -> Var [B].
Var value(Tape & tape, const PolicyModel & model, const ValueHead & head, const std::vector<Observation> & observations);
Var value_from_hidden(Tape & tape, const ValueHead & head, Var hidden_rows);

struct PolicyEval {
    Var log_prob;  // [B]
    Var entropy;   // [B], summed over the K action positions
    Var value;     // [B]
};

// One shared forward for PPO: log-probs, entropy and critic value.
PolicyEval evaluate_policy(Tape & tape, const PolicyModel & model, const ValueHead & head,
                           const std::vector<Observation> & observations, const std::vector<std::vector<int>> & actions,
                           bool stop_critic_gradient);

// Index helpers for the packed layout used by the functions above.
std::size_t marker_position(std::size_t observation_length);

}  // namespace rlrc
