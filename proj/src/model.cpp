#include "rlrc/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rlrc {

using nlohmann::json;

ModelConfig ModelConfig::for_env(const EnvConfig & env) {
    ModelConfig c;
    c.observation_vocab = static_cast<std::size_t>(env.width + env.height + 3);
    return c;
}

void ModelConfig::normalize() {
    if (layer_heads.empty()) {
        layer_heads.assign(n_layers, n_heads);
    }
    if (layer_d_ff.empty()) {
        layer_d_ff.assign(n_layers, d_ff);
    }
    validate();
}

void ModelConfig::validate() const {
    auto fail = [](const std::string & what) { throw Error("invalid model config: " + what); };
    if (d_model == 0) {
        fail("d_model must be positive");
    }
    if (n_layers == 0) {
        fail("n_layers must be positive");
    }
    if (n_heads == 0 || d_model % n_heads != 0) {
        fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_ff == 0) {
        fail("d_ff must be positive");
    }
    if (!layer_heads.empty() && layer_heads.size() != n_layers) {
        fail("layer_heads has " + std::to_string(layer_heads.size()) + " entries for " + std::to_string(n_layers) +
             " layers");
    }
    if (!layer_d_ff.empty() && layer_d_ff.size() != n_layers) {
        fail("layer_d_ff has " + std::to_string(layer_d_ff.size()) + " entries for " + std::to_string(n_layers) +
             " layers");
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (heads(l) < 1 || heads(l) > n_heads) {
            fail("layer " + std::to_string(l) + " head count " + std::to_string(heads(l)) + " outside [1, " +
                 std::to_string(n_heads) + "]");
        }
        if (ff(l) < 1) {
            fail("layer " + std::to_string(l) + " d_ff must be >= 1");
        }
    }
    if (action_vocab == 0 || instruction_vocab == 0 || observation_vocab == 0) {
        fail("vocabulary sizes must be positive");
    }
    if (tokens_per_action == 0) {
        fail("tokens_per_action must be >= 1");
    }
    if (max_seq_len == 0) {
        fail("max_seq_len must be positive");
    }
    if (!(norm_eps > 0.0f)) {
        fail("norm_eps must be positive");
    }
}

json config_to_json(const ModelConfig & c) {
    return json{{"d_model", c.d_model},
                {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},
                {"layer_heads", c.layer_heads},
                {"layer_d_ff", c.layer_d_ff},
                {"instruction_vocab", c.instruction_vocab},
                {"observation_vocab", c.observation_vocab},
                {"action_vocab", c.action_vocab},
                {"tokens_per_action", c.tokens_per_action},
                {"max_seq_len", c.max_seq_len},
                {"norm_eps", c.norm_eps},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json & j) {
    static const char * known[] = {"d_model",           "n_layers",          "n_heads",      "d_ff",
                                   "layer_heads",       "layer_d_ff",        "instruction_vocab",
                                   "observation_vocab", "action_vocab",      "tokens_per_action",
                                   "max_seq_len",       "norm_eps",          "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(std::begin(known), std::end(known), [&](const char * k) { return it.key() == k; }) ==
            std::end(known)) {
            throw Error("unknown model config key '" + it.key() + "'");
        }
    }
    ModelConfig c;
    auto get = [&](const char * key, auto & field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    get("d_model", c.d_model);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("d_ff", c.d_ff);
    get("layer_heads", c.layer_heads);
    get("layer_d_ff", c.layer_d_ff);
    get("instruction_vocab", c.instruction_vocab);
    get("observation_vocab", c.observation_vocab);
    get("action_vocab", c.action_vocab);
    get("tokens_per_action", c.tokens_per_action);
    get("max_seq_len", c.max_seq_len);
    get("norm_eps", c.norm_eps);
    get("seed", c.seed);
    c.validate();
    return c;
}

const char * proj_name(Proj p) {
    switch (p) {
        case Proj::Q: return "wq";
        case Proj::K: return "wk";
        case Proj::V: return "wv";
        case Proj::O: return "wo";
        case Proj::Gate: return "w_gate";
        case Proj::Up: return "w_up";
        case Proj::Down: return "w_down";
    }
    return "?";
}

Tensor & layer_weight(DecoderLayer & layer, Proj p) {
    return const_cast<Tensor &>(layer_weight(static_cast<const DecoderLayer &>(layer), p));
}

const Tensor & layer_weight(const DecoderLayer & layer, Proj p) {
    switch (p) {
        case Proj::Q: return layer.wq;
        case Proj::K: return layer.wk;
        case Proj::V: return layer.wv;
        case Proj::O: return layer.wo;
        case Proj::Gate: return layer.w_gate;
        case Proj::Up: return layer.w_up;
        case Proj::Down: return layer.w_down;
    }
    throw Error("invalid projection");
}

std::vector<std::pair<std::string, const Tensor *>> PolicyModel::named_parameters() const {
    std::vector<std::pair<std::string, const Tensor *>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto & L = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", &L.attn_norm);
        out.emplace_back(p + "wq", &L.wq);
        out.emplace_back(p + "wk", &L.wk);
        out.emplace_back(p + "wv", &L.wv);
        out.emplace_back(p + "wo", &L.wo);
        out.emplace_back(p + "mlp_norm", &L.mlp_norm);
        out.emplace_back(p + "w_gate", &L.w_gate);
        out.emplace_back(p + "w_up", &L.w_up);
        out.emplace_back(p + "w_down", &L.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("action_head", &action_head);
    return out;
}

std::vector<std::pair<std::string, Tensor *>> PolicyModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor *>> out;
    for (auto & [name, t] : std::as_const(*this).named_parameters()) {
        out.emplace_back(name, const_cast<Tensor *>(t));
    }
    return out;
}

std::vector<Tensor *> PolicyModel::parameters() {
    std::vector<Tensor *> out;
    for (auto & np : named_parameters()) {
        out.push_back(np.second);
    }
    return out;
}

std::size_t PolicyModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto & np : named_parameters()) {
        n += np.second->numel();
    }
    return n;
}

void PolicyModel::set_requires_grad(bool on) {
    for (Tensor * t : parameters()) {
        t->set_requires_grad(on);
    }
}

std::vector<std::pair<std::string, const Tensor *>> ValueHead::named_parameters() const {
    return {{"value.w1", &w1}, {"value.b1", &b1}, {"value.w2", &w2}, {"value.b2", &b2}};
}

std::vector<std::pair<std::string, Tensor *>> ValueHead::named_parameters() {
    return {{"value.w1", &w1}, {"value.b1", &b1}, {"value.w2", &w2}, {"value.b2", &b2}};
}

std::vector<Tensor *> ValueHead::parameters() {
    return {&w1, &b1, &w2, &b2};
}

namespace {

class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed) : state_(seed) {}

    // Box-Muller on splitmix64 output; platform independent.
    float next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(next_random(state_) >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(next_random(state_) >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = static_cast<float>(r * std::sin(2.0 * std::numbers::pi * u2));
        has_spare_ = true;
        return static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2));
    }

private:
    std::uint64_t state_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

Tensor normal_tensor(Shape shape, float stddev, NormalStream & rng) {
    Tensor t(std::move(shape));
    for (auto & v : t.data()) {
        v = rng.next() * stddev;
    }
    t.set_requires_grad(true);
    return t;
}

Tensor filled(Shape shape, float v) {
    Tensor t(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
}

}  // namespace

PolicyModel init_model(ModelConfig config, std::uint64_t seed) {
    config.seed = seed;
    config.normalize();
    NormalStream rng(mix_seed(seed, 0xA11CE));
    const std::size_t d = config.d_model, hd = config.head_dim();
    const float proj_std = 1.0f / std::sqrt(static_cast<float>(d));
    const float resid_scale = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));

    PolicyModel m;
    m.config = config;
    m.tok_emb = normal_tensor({config.vocab_size(), d}, 0.5f, rng);
    m.pos_emb = normal_tensor({config.max_seq_len, d}, 0.1f, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::size_t width = config.heads(l) * hd;
        const std::size_t ff = config.ff(l);
        DecoderLayer L;
        L.attn_norm = filled({d}, 1.0f);
        L.wq = normal_tensor({d, width}, proj_std, rng);
        L.wk = normal_tensor({d, width}, proj_std, rng);
        L.wv = normal_tensor({d, width}, proj_std, rng);
        L.wo = normal_tensor({width, d}, resid_scale / std::sqrt(static_cast<float>(width)), rng);
        L.mlp_norm = filled({d}, 1.0f);
        L.w_gate = normal_tensor({d, ff}, proj_std, rng);
        L.w_up = normal_tensor({d, ff}, proj_std, rng);
        L.w_down = normal_tensor({ff, d}, resid_scale / std::sqrt(static_cast<float>(ff)), rng);
        m.layers.push_back(std::move(L));
    }
    m.final_norm = filled({d}, 1.0f);
    m.action_head = normal_tensor({d, config.action_vocab}, proj_std, rng);
    return m;
}

ValueHead init_value_head(std::size_t d_model, std::uint64_t seed) {
    if (d_model == 0) {
        throw Error("value head needs d_model > 0");
    }
    NormalStream rng(mix_seed(seed, 0xC0171C));
    ValueHead h;
    h.w1 = normal_tensor({d_model, ValueHead::hidden}, 1.0f / std::sqrt(static_cast<float>(d_model)), rng);
    h.b1 = filled({ValueHead::hidden}, 0.0f);
    h.w2 = normal_tensor({ValueHead::hidden, 1}, 0.1f / std::sqrt(static_cast<float>(ValueHead::hidden)), rng);
    h.b2 = filled({1}, 0.0f);
    return h;
}

std::size_t config_parameter_count(const ModelConfig & c) {
    const std::size_t d = c.d_model, hd = c.head_dim();
    std::size_t n = c.vocab_size() * d + c.max_seq_len * d + d + d * c.action_vocab;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        n += 2 * d + 4 * d * c.heads(l) * hd + 3 * d * c.ff(l);
    }
    return n;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<std::int32_t>> & rows) {
    if (rows.empty()) {
        throw ShapeError("token batch with zero sequences");
    }
    TokenBatch b;
    b.batch = rows.size();
    b.seq = rows.front().size();
    b.ids.reserve(b.batch * b.seq);
    for (const auto & r : rows) {
        if (r.size() != b.seq) {
            throw ShapeError("token batch rows have unequal lengths " + std::to_string(b.seq) + " and " +
                             std::to_string(r.size()));
        }
        b.ids.insert(b.ids.end(), r.begin(), r.end());
    }
    return b;
}

namespace {

class DenseProjector final : public Projector {
public:
    explicit DenseProjector(const PolicyModel & m) : model_(m) {}

    Var project(Tape & tape, Var x, std::size_t layer, Proj p) const override {
        return ad::matmul(x, tape.leaf(layer_weight(model_.layers[layer], p)));
    }

private:
    const PolicyModel & model_;
};

}  // namespace

ForwardResult forward(Tape & tape, const PolicyModel & model, const TokenBatch & tokens,
                      std::span<const std::size_t> rows) {
    return forward_with(tape, model, DenseProjector(model), tokens, rows);
}

ForwardResult forward_with(Tape & tape, const PolicyModel & model, const Projector & projector,
                           const TokenBatch & tokens, std::span<const std::size_t> rows) {
    const ModelConfig & c = model.config;
    if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
        throw ShapeError("malformed token batch (" + std::to_string(tokens.batch) + " x " +
                         std::to_string(tokens.seq) + ", " + std::to_string(tokens.ids.size()) + " ids)");
    }
    if (tokens.seq > c.max_seq_len) {
        throw ShapeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    }
    std::vector<std::int32_t> positions(tokens.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<std::int32_t>(i % tokens.seq);
    }
    Var x = ad::add(ad::embedding(tape.leaf(model.tok_emb), tokens.ids),
                    ad::embedding(tape.leaf(model.pos_emb), positions));
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const DecoderLayer & L = model.layers[l];
        Var h = ad::mul_last(ad::rms_norm(x, 1, c.norm_eps), tape.leaf(L.attn_norm));
        Var q = projector.project(tape, h, l, Proj::Q);
        Var k = projector.project(tape, h, l, Proj::K);
        Var v = projector.project(tape, h, l, Proj::V);
        Var a = ad::causal_attention(q, k, v, tokens.batch, tokens.seq, c.heads(l));
        x = ad::add(x, projector.project(tape, a, l, Proj::O));
        h = ad::mul_last(ad::rms_norm(x, 1, c.norm_eps), tape.leaf(L.mlp_norm));
        Var gate = ad::silu(projector.project(tape, h, l, Proj::Gate));
        Var up = projector.project(tape, h, l, Proj::Up);
        x = ad::add(x, projector.project(tape, ad::mul(gate, up), l, Proj::Down));
    }
    if (!rows.empty()) {
        x = ad::select_rows(x, rows);
    }
    Var hidden = ad::mul_last(ad::rms_norm(x, 1, c.norm_eps), tape.leaf(model.final_norm));
    Var logits = ad::matmul(hidden, tape.leaf(model.action_head));
    return {logits, hidden};
}

std::size_t marker_position(std::size_t observation_length) {
    return observation_length;
}

std::vector<std::int32_t> build_context(const ModelConfig & config, std::span<const std::int32_t> observation,
                                        std::span<const int> actions) {
    std::vector<std::int32_t> ctx(observation.begin(), observation.end());
    ctx.push_back(config.action_marker());
    for (int a : actions) {
        if (a < 0 || static_cast<std::size_t>(a) >= config.action_vocab) {
            throw Error("action id " + std::to_string(a) + " outside [0, " + std::to_string(config.action_vocab) + ")");
        }
        ctx.push_back(config.action_token(static_cast<std::size_t>(a)));
    }
    return ctx;
}

namespace {

int pick_action(std::span<const float> logits, SampleMode mode, std::uint64_t & rng) {
    if (mode.greedy) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    if (!(mode.temperature > 0.0f)) {
        throw Error("sampling temperature must be positive");
    }
    const float mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i] - mx) / mode.temperature);
        z += p[i];
    }
    const double u = static_cast<double>(next_random(rng) >> 11) * 0x1.0p-53 * z;
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(p.size() - 1);
}

}  // namespace

std::vector<SampledAction> sample_actions(const PolicyModel & model, const std::vector<Observation> & observations,
                                          SampleMode mode, std::uint64_t & rng, const Projector * projector) {
    const ModelConfig & c = model.config;
    const std::size_t K = c.tokens_per_action;
    if (K == 0) {
        throw Error("tokens_per_action must be >= 1");
    }
    if (observations.empty()) {
        return {};
    }
    std::vector<std::vector<std::int32_t>> ctx;
    ctx.reserve(observations.size());
    for (const auto & o : observations) {
        ctx.push_back(build_context(c, o));
    }
    std::vector<SampledAction> out(observations.size());
    const std::size_t A = c.action_vocab;
    for (std::size_t k = 0; k < K; ++k) {
        Tape tape(false);
        const TokenBatch batch = TokenBatch::from_rows(ctx);
        std::vector<std::size_t> rows(batch.batch);
        for (std::size_t b = 0; b < batch.batch; ++b) {
            rows[b] = b * batch.seq + batch.seq - 1;
        }
        ForwardResult fr = projector ? forward_with(tape, model, *projector, batch, rows) : forward(tape, model, batch, rows);
        std::vector<std::int32_t> chosen(batch.batch);
        const auto logits = fr.logits.value().data();
        for (std::size_t b = 0; b < batch.batch; ++b) {
            chosen[b] = pick_action(logits.subspan(b * A, A), mode, rng);
        }
        Var lp = ad::gather_log_softmax(fr.logits, chosen);
        for (std::size_t b = 0; b < batch.batch; ++b) {
            out[b].actions.push_back(chosen[b]);
            out[b].log_prob += lp.value()[b];
            ctx[b].push_back(c.action_token(static_cast<std::size_t>(chosen[b])));
        }
    }
    return out;
}

ActorCriticStep act(const PolicyModel & model, const ValueHead & head, const std::vector<Observation> & observations,
                    SampleMode mode, std::uint64_t & rng) {
    const ModelConfig & c = model.config;
    if (c.tokens_per_action != 1) {
        throw Error("act() supports single-token actions only, model has tokens_per_action=" +
                    std::to_string(c.tokens_per_action));
    }
    if (observations.empty()) {
        return {};
    }
    std::vector<std::vector<std::int32_t>> ctx;
    for (const auto & o : observations) {
        ctx.push_back(build_context(c, o));
    }
    Tape tape(false);
    const TokenBatch batch = TokenBatch::from_rows(ctx);
    std::vector<std::size_t> rows(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        rows[b] = b * batch.seq + batch.seq - 1;
    }
    ForwardResult fr = forward(tape, model, batch, rows);
    const std::size_t A = c.action_vocab;
    const auto logits = fr.logits.value().data();
    std::vector<std::int32_t> chosen(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        chosen[b] = pick_action(logits.subspan(b * A, A), mode, rng);
    }
    Var lp = ad::gather_log_softmax(fr.logits, chosen);
    Var v = value_from_hidden(tape, head, fr.hidden);
    ActorCriticStep out;
    out.actions.assign(chosen.begin(), chosen.end());
    out.log_probs.assign(lp.value().data().begin(), lp.value().data().end());
    out.values.assign(v.value().data().begin(), v.value().data().end());
    return out;
}

SampledAction sample_action(const PolicyModel & model, const Observation & observation, SampleMode mode,
                            std::uint64_t & rng) {
    return sample_actions(model, {observation}, mode, rng).front();
}

namespace {

struct ActionBatch {
    TokenBatch tokens;
    std::vector<std::size_t> rows;       // B*K rows, marker..marker+K-1 per sample
    std::vector<std::int32_t> targets;   // B*K
    std::vector<std::size_t> marker_rows;  // index into rows of each sample's marker
};

ActionBatch pack_actions(const ModelConfig & c, const std::vector<Observation> & observations,
                         const std::vector<std::vector<int>> & actions) {
    const std::size_t K = c.tokens_per_action;
    if (observations.size() != actions.size() || observations.empty()) {
        throw ShapeError("action batch: " + std::to_string(observations.size()) + " observations, " +
                         std::to_string(actions.size()) + " action sequences");
    }
    std::vector<std::vector<std::int32_t>> ctx;
    ActionBatch ab;
    for (std::size_t b = 0; b < observations.size(); ++b) {
        if (actions[b].size() != K) {
            throw ShapeError("expected " + std::to_string(K) + " action tokens, got " + std::to_string(actions[b].size()));
        }
        for (int a : actions[b]) {
            if (a < 0 || static_cast<std::size_t>(a) >= c.action_vocab) {
                throw Error("action token " + std::to_string(a) + " outside action vocab of " +
                            std::to_string(c.action_vocab));
            }
        }
        ctx.push_back(build_context(c, observations[b], std::span<const int>(actions[b]).first(K - 1)));
    }
    ab.tokens = TokenBatch::from_rows(ctx);
    const std::size_t marker = ab.tokens.seq - K;
    for (std::size_t b = 0; b < observations.size(); ++b) {
        ab.marker_rows.push_back(ab.rows.size());
        for (std::size_t k = 0; k < K; ++k) {
            ab.rows.push_back(b * ab.tokens.seq + marker + k);
            ab.targets.push_back(actions[b][k]);
        }
    }
    return ab;
}

}  // namespace

Var action_logprob(Tape & tape, const PolicyModel & model, const std::vector<Observation> & observations,
                   const std::vector<std::vector<int>> & actions) {
    const ActionBatch ab = pack_actions(model.config, observations, actions);
    ForwardResult fr = forward(tape, model, ab.tokens, ab.rows);
    Var lp = ad::gather_log_softmax(fr.logits, ab.targets);
    return ad::row_sum(ad::reshape(lp, {observations.size(), model.config.tokens_per_action}));
}

float action_logprob(const PolicyModel & model, const Observation & observation, const std::vector<int> & actions) {
    Tape tape(false);
    return action_logprob(tape, model, {observation}, {actions}).value()[0];
}

Var value_from_hidden(Tape & tape, const ValueHead & head, Var hidden_rows) {
    const std::size_t n = hidden_rows.shape().at(0);
    if (hidden_rows.shape().size() != 2 || hidden_rows.shape()[1] != head.w1.dim(0)) {
        throw ShapeError("value head expects [n x " + std::to_string(head.w1.dim(0)) + "] input, got " +
                         shape_str(hidden_rows.shape()));
    }
    Var h = ad::silu(ad::add_bias(ad::matmul(hidden_rows, tape.leaf(head.w1)), tape.leaf(head.b1)));
    Var v = ad::add_bias(ad::matmul(h, tape.leaf(head.w2)), tape.leaf(head.b2));
    return ad::reshape(v, {n});
}

Var value(Tape & tape, const PolicyModel & model, const ValueHead & head, const std::vector<Observation> & observations) {
    if (observations.empty()) {
        throw ShapeError("value() with zero observations");
    }
    std::vector<std::vector<std::int32_t>> ctx;
    for (const auto & o : observations) {
        ctx.push_back(build_context(model.config, o));
    }
    const TokenBatch batch = TokenBatch::from_rows(ctx);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        rows.push_back(b * batch.seq + marker_position(observations[b].size()));
    }
    ForwardResult fr = forward(tape, model, batch, rows);
    return value_from_hidden(tape, head, fr.hidden);
}

PolicyEval evaluate_policy(Tape & tape, const PolicyModel & model, const ValueHead & head,
                           const std::vector<Observation> & observations, const std::vector<std::vector<int>> & actions,
                           bool stop_critic_gradient) {
    const std::size_t K = model.config.tokens_per_action;
    const ActionBatch ab = pack_actions(model.config, observations, actions);
    ForwardResult fr = forward(tape, model, ab.tokens, ab.rows);
    const std::size_t B = observations.size();
    Var lp = ad::row_sum(ad::reshape(ad::gather_log_softmax(fr.logits, ab.targets), {B, K}));
    Var ent = ad::row_sum(ad::reshape(ad::row_entropy(fr.logits), {B, K}));
    Var h0 = K == 1 ? fr.hidden : ad::select_rows(fr.hidden, ab.marker_rows);
    if (stop_critic_gradient) {
        h0 = ad::stop_gradient(h0);
    }
    return {lp, ent, value_from_hidden(tape, head, h0)};
}

}  // namespace rlrc
