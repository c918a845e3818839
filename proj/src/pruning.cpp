#include "rlrc/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace rlrc {

using nlohmann::json;

const char * group_kind_name(GroupKind k) {
    return k == GroupKind::MlpChannel ? "mlp_channel" : "attn_head";
}

GroupKind parse_group_kind(const std::string & s) {
    if (s == "mlp_channel") {
        return GroupKind::MlpChannel;
    }
    if (s == "attn_head") {
        return GroupKind::AttnHead;
    }
    throw Error("unknown group kind '" + s + "'");
}

namespace {

std::string param_name(std::size_t layer, Proj p) {
    return "layers." + std::to_string(layer) + "." + proj_name(p);
}

bool is_exempt(std::span<const std::size_t> exempt, std::size_t layer) {
    return std::find(exempt.begin(), exempt.end(), layer) != exempt.end();
}

const Tensor & find_param(const PolicyModel & model, const std::string & name) {
    for (const auto & [n, t] : model.named_parameters()) {
        if (n == name) {
            return *t;
        }
    }
    throw Error("dependency group references unknown parameter '" + name + "'");
}

// Visits the flat indices of a slice of a rank-2 tensor.
template <typename Fn>
void for_slice(const Tensor & t, const Slice & s, Fn && fn) {
    if (t.rank() != 2 || s.axis > 1 || s.end > t.dim(s.axis) || s.begin > s.end) {
        throw ShapeError("slice [" + std::to_string(s.begin) + ", " + std::to_string(s.end) + ") on axis " +
                         std::to_string(s.axis) + " of " + s.param + " " + shape_str(t.shape()));
    }
    const std::size_t rows = t.dim(0), cols = t.dim(1);
    if (s.axis == 0) {
        for (std::size_t r = s.begin; r < s.end; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                fn(r * cols + c);
            }
        }
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = s.begin; c < s.end; ++c) {
                fn(r * cols + c);
            }
        }
    }
}

bool entry_less(const ImportanceEntry & a, const ImportanceEntry & b) {
    if (a.score != b.score) {
        return a.score < b.score;
    }
    if (a.layer != b.layer) {
        return a.layer < b.layer;
    }
    if (a.kind != b.kind) {
        return a.kind < b.kind;
    }
    return a.index < b.index;
}

// Keeps the listed rows (axis 0) or columns (axis 1) of a rank-2 tensor.
Tensor keep_along(const Tensor & t, std::size_t axis, const std::vector<std::size_t> & keep) {
    const std::size_t rows = t.dim(0), cols = t.dim(1);
    if (axis == 0) {
        std::vector<float> out;
        out.reserve(keep.size() * cols);
        for (std::size_t r : keep) {
            out.insert(out.end(), t.data().begin() + static_cast<std::ptrdiff_t>(r * cols),
                       t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
        }
        return Tensor({keep.size(), cols}, std::move(out));
    }
    std::vector<float> out;
    out.reserve(rows * keep.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c : keep) {
            out.push_back(t.at(r, c));
        }
    }
    return Tensor({rows, keep.size()}, std::move(out));
}

}  // namespace

std::size_t group_param_count(const ModelConfig & c, GroupKind kind) {
    return kind == GroupKind::MlpChannel ? 3 * c.d_model : 4 * c.d_model * c.head_dim();
}

std::vector<DependencyGroup> build_dependency_groups(const PolicyModel & model) {
    const ModelConfig & c = model.config;
    if (model.layers.size() != c.n_layers) {
        throw Error("model has " + std::to_string(model.layers.size()) + " layers, config says " +
                    std::to_string(c.n_layers));
    }
    const std::size_t hd = c.head_dim();
    std::vector<DependencyGroup> groups;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const DecoderLayer & L = model.layers[l];
        const std::size_t ff = c.ff(l), heads = c.heads(l);
        if (L.w_gate.shape() != Shape{c.d_model, ff} || L.w_up.shape() != Shape{c.d_model, ff} ||
            L.w_down.shape() != Shape{ff, c.d_model} || L.wq.shape() != Shape{c.d_model, heads * hd} ||
            L.wk.shape() != L.wq.shape() || L.wv.shape() != L.wq.shape() || L.wo.shape() != Shape{heads * hd, c.d_model}) {
            throw ShapeError("layer " + std::to_string(l) + " does not follow the decoder layout");
        }
        for (std::size_t ch = 0; ch < ff; ++ch) {
            DependencyGroup g{GroupKind::MlpChannel, l, ch, {}};
            g.members.push_back({param_name(l, Proj::Gate), 1, ch, ch + 1});
            g.members.push_back({param_name(l, Proj::Up), 1, ch, ch + 1});
            g.members.push_back({param_name(l, Proj::Down), 0, ch, ch + 1});
            groups.push_back(std::move(g));
        }
        for (std::size_t h = 0; h < heads; ++h) {
            DependencyGroup g{GroupKind::AttnHead, l, h, {}};
            for (Proj p : {Proj::Q, Proj::K, Proj::V}) {
                g.members.push_back({param_name(l, p), 1, h * hd, (h + 1) * hd});
            }
            g.members.push_back({param_name(l, Proj::O), 0, h * hd, (h + 1) * hd});
            groups.push_back(std::move(g));
        }
    }
    return groups;
}

double taylor_score(std::span<const float> weights, std::span<const float> grads) {
    if (weights.size() != grads.size()) {
        throw ShapeError("taylor_score: " + std::to_string(weights.size()) + " weights vs " +
                         std::to_string(grads.size()) + " gradients");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        s += std::abs(static_cast<double>(weights[i]) * grads[i]);
    }
    return s;
}

std::vector<std::size_t> default_exempt_layers(const ModelConfig & config) {
    if (config.n_layers == 1) {
        return {0};
    }
    return {0, config.n_layers - 1};
}

std::vector<SftSample> calibration_samples(std::span<const Demonstration> demos, std::size_t max_steps,
                                           std::uint64_t seed) {
    std::vector<SftSample> all = flatten_demos(demos);
    if (all.size() <= max_steps) {
        return all;
    }
    std::uint64_t rng = mix_seed(seed, 0xca1);
    for (std::size_t i = 0; i < max_steps; ++i) {
        std::swap(all[i], all[i + uniform_below(rng, all.size() - i)]);
    }
    all.resize(max_steps);
    return all;
}

ImportanceTable taylor_importance(PolicyModel & model, std::span<const SftSample> calibration,
                                  std::span<const std::size_t> exempt_layers, std::uint64_t seed) {
    if (calibration.empty()) {
        throw Error("taylor_importance needs a non-empty calibration batch");
    }
    const std::vector<DependencyGroup> groups = build_dependency_groups(model);
    model.set_requires_grad(true);
    for (Tensor * t : model.parameters()) {
        t->zero_grad();
    }
    ImportanceTable table;
    table.calibration_size = calibration.size();
    table.seed = seed;
    {
        Tape tape;
        Var loss = sft_loss(tape, model, calibration);
        table.loss = loss.item();
        if (!std::isfinite(table.loss)) {
            throw NumericError("calibration loss is not finite");
        }
        tape.backward(loss);
    }
    for (const auto & g : groups) {
        if (is_exempt(exempt_layers, g.layer)) {
            continue;
        }
        double score = 0.0;
        for (const auto & m : g.members) {
            const Tensor & t = find_param(model, m.param);
            const auto w = t.data();
            const auto gr = t.grad();
            for_slice(t, m, [&](std::size_t i) { score += std::abs(static_cast<double>(w[i]) * gr[i]); });
        }
        table.entries.push_back({g.kind, g.layer, g.index, group_param_count(model.config, g.kind), score});
    }
    for (Tensor * t : model.parameters()) {
        t->drop_grad();
    }
    model.set_requires_grad(false);
    return table;
}

json plan_to_json(const PrunePlan & plan) {
    json groups = json::array();
    for (const auto & g : plan.groups) {
        groups.push_back(
            {{"kind", group_kind_name(g.kind)}, {"layer", g.layer}, {"index", g.index}, {"params", g.params}, {"score", g.score}});
    }
    return json{{"target_ratio", plan.target_ratio},
                {"achieved_ratio", plan.achieved_ratio},
                {"whole_model_ratio", plan.whole_model_ratio},
                {"prunable_params", plan.prunable_params},
                {"removed_params", plan.removed_params},
                {"total_params", plan.total_params},
                {"exempt_layers", plan.exempt_layers},
                {"groups", groups}};
}

PrunePlan plan_from_json(const json & j) {
    PrunePlan p;
    j.at("target_ratio").get_to(p.target_ratio);
    j.at("achieved_ratio").get_to(p.achieved_ratio);
    j.at("whole_model_ratio").get_to(p.whole_model_ratio);
    j.at("prunable_params").get_to(p.prunable_params);
    j.at("removed_params").get_to(p.removed_params);
    j.at("total_params").get_to(p.total_params);
    j.at("exempt_layers").get_to(p.exempt_layers);
    for (const auto & g : j.at("groups")) {
        ImportanceEntry e;
        e.kind = parse_group_kind(g.at("kind").get<std::string>());
        g.at("layer").get_to(e.layer);
        g.at("index").get_to(e.index);
        g.at("params").get_to(e.params);
        g.at("score").get_to(e.score);
        p.groups.push_back(e);
    }
    return p;
}

PrunePlan select_prune_groups(const ImportanceTable & table, const ModelConfig & config, double target_ratio,
                              std::span<const std::size_t> exempt_layers) {
    if (!(target_ratio >= 0.0) || target_ratio >= 1.0) {
        throw Error("prune ratio must be in [0, 1), got " + std::to_string(target_ratio));
    }
    const ParamCounts counts = param_counts(config, exempt_layers);
    PrunePlan plan;
    plan.target_ratio = target_ratio;
    plan.prunable_params = counts.prunable;
    plan.total_params = counts.total;
    plan.exempt_layers.assign(exempt_layers.begin(), exempt_layers.end());
    std::sort(plan.exempt_layers.begin(), plan.exempt_layers.end());
    if (target_ratio == 0.0) {
        return plan;
    }
    if (counts.prunable == 0) {
        throw Error("prune ratio " + std::to_string(target_ratio) + " unreachable: no prunable parameters");
    }
    for (const auto & e : table.entries) {
        if (is_exempt(exempt_layers, e.layer)) {
            throw Error("importance table contains a group of exempt layer " + std::to_string(e.layer));
        }
        if (!std::isfinite(e.score) || e.score < 0.0) {
            throw NumericError("importance score must be finite and non-negative");
        }
    }
    std::vector<ImportanceEntry> order = table.entries;
    std::sort(order.begin(), order.end(), entry_less);
    std::vector<std::size_t> heads_left(config.n_layers), ff_left(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        heads_left[l] = config.heads(l);
        ff_left[l] = config.ff(l);
    }
    const double need = target_ratio * static_cast<double>(counts.prunable);
    for (const auto & e : order) {
        if (static_cast<double>(plan.removed_params) >= need) {
            break;
        }
        std::size_t & left = e.kind == GroupKind::MlpChannel ? ff_left.at(e.layer) : heads_left.at(e.layer);
        if (left <= 1) {
            continue;
        }
        --left;
        plan.groups.push_back(e);
        plan.removed_params += e.params;
    }
    if (static_cast<double>(plan.removed_params) < need) {
        throw Error("prune ratio " + std::to_string(target_ratio) + " unreachable with exempt layers; at most " +
                    std::to_string(static_cast<double>(plan.removed_params) / static_cast<double>(counts.prunable)) +
                    " while keeping one head and one channel per layer");
    }
    plan.achieved_ratio = static_cast<double>(plan.removed_params) / static_cast<double>(counts.prunable);
    plan.whole_model_ratio = static_cast<double>(plan.removed_params) / static_cast<double>(counts.total);
    return plan;
}

PolicyModel apply_prune(const PolicyModel & model, const PrunePlan & plan) {
    ModelConfig c = model.config;
    c.normalize();
    std::vector<std::set<std::size_t>> drop_heads(c.n_layers), drop_ch(c.n_layers);
    for (const auto & g : plan.groups) {
        if (g.layer >= c.n_layers) {
            throw Error("plan references layer " + std::to_string(g.layer) + " of a " + std::to_string(c.n_layers) +
                        "-layer model");
        }
        if (is_exempt(plan.exempt_layers, g.layer)) {
            throw Error("plan prunes exempt layer " + std::to_string(g.layer));
        }
        const std::size_t width = g.kind == GroupKind::MlpChannel ? c.ff(g.layer) : c.heads(g.layer);
        if (g.index >= width) {
            throw Error(std::string("plan ") + group_kind_name(g.kind) + " index " + std::to_string(g.index) +
                        " out of range for layer " + std::to_string(g.layer) + " width " + std::to_string(width));
        }
        auto & set = g.kind == GroupKind::MlpChannel ? drop_ch[g.layer] : drop_heads[g.layer];
        if (!set.insert(g.index).second) {
            throw Error("plan lists a group twice");
        }
    }
    PolicyModel out = model;
    const std::size_t hd = c.head_dim();
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        if (drop_heads[l].size() >= c.heads(l) || drop_ch[l].size() >= c.ff(l)) {
            throw Error("plan would empty layer " + std::to_string(l));
        }
        std::vector<std::size_t> keep_cols, keep_ch;
        for (std::size_t h = 0; h < c.heads(l); ++h) {
            if (!drop_heads[l].count(h)) {
                for (std::size_t i = 0; i < hd; ++i) {
                    keep_cols.push_back(h * hd + i);
                }
            }
        }
        for (std::size_t ch = 0; ch < c.ff(l); ++ch) {
            if (!drop_ch[l].count(ch)) {
                keep_ch.push_back(ch);
            }
        }
        DecoderLayer & L = out.layers[l];
        L.wq = keep_along(L.wq, 1, keep_cols);
        L.wk = keep_along(L.wk, 1, keep_cols);
        L.wv = keep_along(L.wv, 1, keep_cols);
        L.wo = keep_along(L.wo, 0, keep_cols);
        L.w_gate = keep_along(L.w_gate, 1, keep_ch);
        L.w_up = keep_along(L.w_up, 1, keep_ch);
        L.w_down = keep_along(L.w_down, 0, keep_ch);
        c.layer_heads[l] = c.heads(l) - drop_heads[l].size();
        c.layer_d_ff[l] = keep_ch.size();
    }
    c.validate();
    out.config = c;
    out.set_requires_grad(false);
    return out;
}

MagnitudeMask magnitude_mask(PolicyModel & model, double sparsity) {
    if (!(sparsity >= 0.0) || sparsity >= 1.0) {
        throw Error("sparsity must be in [0, 1), got " + std::to_string(sparsity));
    }
    MagnitudeMask mask;
    mask.sparsity = sparsity;
    for (auto & L : model.layers) {
        for (Proj p : kAllProjs) {
            Tensor & w = layer_weight(L, p);
            const std::size_t n = w.numel();
            const auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n)));
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), 0);
            auto data = w.data();
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return std::abs(data[a]) < std::abs(data[b]); });
            idx.resize(k);
            std::sort(idx.begin(), idx.end());
            for (std::size_t i : idx) {
                data[i] = 0.0f;
            }
            mask.zeroed.push_back(std::move(idx));
        }
    }
    return mask;
}

ParamCounts param_counts(const ModelConfig & config, std::span<const std::size_t> exempt_layers) {
    ModelConfig c = config;
    c.normalize();
    ParamCounts pc;
    pc.total = config_parameter_count(c);
    const std::size_t d = c.d_model, hd = c.head_dim();
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerParams lp;
        lp.layer = l;
        lp.heads = c.heads(l);
        lp.d_ff = c.ff(l);
        lp.attention = 4 * d * lp.heads * hd;
        lp.mlp = 3 * d * lp.d_ff;
        lp.norms = 2 * d;
        lp.exempt = is_exempt(exempt_layers, l);
        if (!lp.exempt) {
            pc.prunable += lp.attention + lp.mlp;
        }
        pc.layers.push_back(lp);
    }
    return pc;
}

ParamCounts param_counts(const PolicyModel & model, std::span<const std::size_t> exempt_layers) {
    ParamCounts pc = param_counts(model.config, exempt_layers);
    pc.total = model.parameter_count();
    return pc;
}

}  // namespace rlrc
