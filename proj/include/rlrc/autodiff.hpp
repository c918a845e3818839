#pragma once

#include "rlrc/tensor.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>

namespace rlrc {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid for the
// lifetime of the tape (until reset()).
class Var {
public:
    Var() = default;

    const Tensor & value() const;
    const Shape & shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    float item() const;
    bool valid() const { return tape_ != nullptr; }
    Tape * tape() const { return tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape;
    Var(Tape * tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape * tape_ = nullptr;
    std::size_t id_ = 0;
};

// Records differentiable operations in execution order and replays them in
// reverse to produce gradients. A tape constructed with recording=false is a
// pure inference context: ops compute values but keep no backward closures.
class Tape {
public:
    using BackwardFn = std::function<void(Tape &, std::span<const float>)>;

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape &) = delete;
    Tape & operator=(const Tape &) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    // Binds a tensor without copying it; it must outlive the tape. If the
    // tensor requires grad, its gradient buffer receives the accumulated
    // gradient on backward(). The gradient is bookkeeping, not part of the
    // tensor's value, so a const reference is accepted.
    Var leaf(const Tensor & param);
    Var constant(Tensor value);

    void backward(Var loss);
    void reset();

    // Op-author interface.
    Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    bool needs_grad(Var v) const;
    std::span<float> grad_buffer(Var v);
    const Tensor & value_of(std::size_t id) const;

private:
    struct Node {
        Tensor owned;
        const Tensor * ref = nullptr;
        Tensor * param = nullptr;
        std::vector<float> grad;
        BackwardFn backward;
        bool needs_grad = false;
    };

    std::deque<Node> nodes_;
    bool recording_ = true;
    bool backward_done_ = false;
};

namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var square(Var a);
Var silu(Var a);

// x[m x n] + bias[n] broadcast over rows
Var add_bias(Var x, Var bias);
// x[... x n] * gain[n] broadcast over the last axis
Var mul_last(Var x, Var gain);

Var softmax(Var x, std::size_t axis);
// Normalizes to unit root-mean-square along axis (no affine gain).
Var rms_norm(Var x, std::size_t axis, float eps);

// table[V x d], ids -> [n x d]
Var embedding(Var table, std::span<const std::int32_t> ids);
// Rows of x selected by index.
Var select_rows(Var x, std::span<const std::size_t> rows);
Var reshape(Var x, Shape shape);
Var stop_gradient(Var x);

// Mean negative log-likelihood of target ids under row-wise softmax(logits).
Var cross_entropy(Var logits, std::span<const std::int32_t> targets);
// Per-row log-softmax value at the target id -> [n]
Var gather_log_softmax(Var logits, std::span<const std::int32_t> targets);
// Per-row entropy of softmax(logits) -> [n]
Var row_entropy(Var logits);

Var sum(Var x);
Var mean(Var x);
// [m x n] -> [m], float accumulation in ascending column order.
Var row_sum(Var x);

// Causal multi-head self-attention over packed sequences. q, k, v are
// [batch*seq x heads*head_dim]; row b*seq+t holds position t of sequence b.
Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);

// Mean over transitions of min(r*A, clip(r, 1-eps, 1+eps)*A), with
// r = exp(logp_new - logp_old).
Var ppo_clipped_surrogate(Var logp_new, std::span<const float> logp_old, std::span<const float> advantages,
                          float eps);

}  // namespace ad

// Scalar clipped surrogate for one transition.
double ppo_objective(double ratio, double advantage, double eps);

}  // namespace rlrc
