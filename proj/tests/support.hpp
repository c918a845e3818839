#pragma once

// Shared oracles for the unit tests and the acceptance binary.

#include "rlrc/autodiff.hpp"
#include "rlrc/env.hpp"
#include "rlrc/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

namespace rlrc::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t & rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (float & v : t.data()) {
        const double u = static_cast<double>(next_random(rng) >> 11) * 0x1.0p-53;
        v = static_cast<float>((2.0 * u - 1.0) * scale);
    }
    return t;
}

using GraphFn = std::function<Var(Tape &, std::vector<Var> &)>;

// Max over inputs of ||g_autodiff - g_fd|| / max(||g_autodiff||, ||g_fd||, 1e-6)
// with central differences in float.
inline double gradient_check(const GraphFn & f, std::vector<Tensor> & inputs, float eps = 2e-3f) {
    for (auto & t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    {
        Tape tape;
        std::vector<Var> leaves;
        for (auto & t : inputs) {
            leaves.push_back(tape.leaf(t));
        }
        tape.backward(f(tape, leaves));
    }
    auto eval = [&]() {
        Tape tape(false);
        std::vector<Var> leaves;
        for (auto & t : inputs) {
            leaves.push_back(tape.leaf(t));
        }
        return static_cast<double>(f(tape, leaves).item());
    };
    double worst = 0.0;
    for (auto & t : inputs) {
        std::vector<double> fd(t.numel());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const float orig = t[i];
            t[i] = orig + eps;
            const double hi = eval();
            t[i] = orig - eps;
            const double lo = eval();
            t[i] = orig;
            fd[i] = (hi - lo) / (static_cast<double>(orig + eps) - static_cast<double>(orig - eps));
        }
        double diff = 0.0, na = 0.0, nf = 0.0;
        const auto g = std::as_const(t).grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            diff += (g[i] - fd[i]) * (g[i] - fd[i]);
            na += static_cast<double>(g[i]) * g[i];
            nf += fd[i] * fd[i];
        }
        worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nf), 1e-6}));
    }
    return worst;
}

// Discounted-sum oracle for GAE: advantage_t = Σ_k (γλ)^k δ_{t+k} written out
// with explicit products, stopping at episode ends.
struct BruteForceGae {
    std::vector<double> advantages;
    std::vector<double> returns;
};

inline BruteForceGae brute_force_gae(const std::vector<float> & r, const std::vector<float> & v,
                                     const std::vector<int> & end_kind,  // 0 none, 1 terminal, 2 truncated
                                     const std::vector<float> & tv, float bootstrap, double gamma, double lambda) {
    const std::size_t T = r.size();
    std::vector<double> delta(T);
    for (std::size_t t = 0; t < T; ++t) {
        double next = 0.0;
        if (end_kind[t] == 1) {
            next = 0.0;
        } else if (end_kind[t] == 2) {
            next = tv[t];
        } else {
            next = t + 1 < T ? v[t + 1] : bootstrap;
        }
        delta[t] = r[t] + gamma * next - v[t];
    }
    BruteForceGae out;
    for (std::size_t t = 0; t < T; ++t) {
        double a = 0.0;
        for (std::size_t k = t; k < T; ++k) {
            double w = 1.0;
            for (std::size_t j = t; j < k; ++j) {
                w *= gamma * lambda;
            }
            a += w * delta[k];
            if (end_kind[k] != 0) {
                break;
            }
        }
        out.advantages.push_back(a);
        out.returns.push_back(a + v[t]);
    }
    return out;
}

inline std::vector<double> ranks(const std::vector<double> & x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j);
        for (std::size_t k = i; k <= j; ++k) {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

inline double spearman(const std::vector<double> & a, const std::vector<double> & b) {
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

inline Tensor & param_by_name(PolicyModel & model, const std::string & name) {
    for (auto & [n, t] : model.named_parameters()) {
        if (n == name) {
            return *t;
        }
    }
    throw Error("no parameter " + name);
}

// Zeroes every member slice of a group in place.
inline void zero_group(PolicyModel & model, const DependencyGroup & g) {
    for (const Slice & s : g.members) {
        Tensor & t = param_by_name(model, s.param);
        const std::size_t rows = t.dim(0), cols = t.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t along = s.axis == 0 ? r : c;
                if (along >= s.begin && along < s.end) {
                    t.at(r, c) = 0.0f;
                }
            }
        }
    }
}

inline double mean_sft_loss(const PolicyModel & model, std::span<const SftSample> batch) {
    Tape tape(false);
    return sft_loss(tape, model, batch).item();
}

// Tiny model (2 layers, d_ff 32, d_model 64, 4 heads) trained on expert demos,
// used for the Taylor-vs-brute-force ranking check.
struct FidelityResult {
    double spearman = 0.0;
    std::size_t groups = 0;
};

inline FidelityResult taylor_fidelity(std::uint64_t seed) {
    ModelConfig c = ModelConfig::for_env({});
    c.d_model = 64;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_ff = 32;
    PolicyModel model = init_model(c, seed);
    const TaskSuite suite = make_task_suite(seed);
    const auto demos = make_demos(suite.ind, 4, seed);
    SftConfig sft;
    sft.learning_rate = 3e-3f;
    sft.max_steps = 1000;
    sft.batch_size = 32;
    sft.seed = seed;
    train_sft(model, demos, sft, {});
    model.set_requires_grad(true);

    const auto calib = calibration_samples(demos, 256, seed);
    const std::vector<std::size_t> exempt;  // score every group in both layers
    const ImportanceTable table = taylor_importance(model, calib, exempt, seed);
    const double base = mean_sft_loss(model, calib);
    const auto groups = build_dependency_groups(model);
    std::vector<double> taylor, brute;
    for (const auto & e : table.entries) {
        for (const auto & g : groups) {
            if (g.kind == e.kind && g.layer == e.layer && g.index == e.index) {
                PolicyModel masked = model;
                zero_group(masked, g);
                taylor.push_back(e.score);
                brute.push_back(std::abs(mean_sft_loss(masked, calib) - base));
            }
        }
    }
    return {spearman(taylor, brute), taylor.size()};
}

inline Tensor logits_of(const PolicyModel & m, const std::vector<std::vector<std::int32_t>> & rows) {
    Tape tape(false);
    return forward(tape, m, TokenBatch::from_rows(rows)).logits.value();
}

inline std::vector<std::vector<std::int32_t>> random_contexts(const ModelConfig & c, std::uint64_t & rng, std::size_t n) {
    std::vector<std::vector<std::int32_t>> rows;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::int32_t> row(16);
        for (auto & t : row) {
            t = static_cast<std::int32_t>(uniform_below(rng, c.vocab_size()));
        }
        rows.push_back(row);
    }
    return rows;
}

// Random importance scores and a random ratio for the given model; returns
// the plan selected from them.
inline PrunePlan random_plan(const PolicyModel & model, std::uint64_t & rng, double max_ratio = 0.9) {
    const auto exempt = default_exempt_layers(model.config);
    ImportanceTable table;
    for (const auto & g : build_dependency_groups(model)) {
        if (std::find(exempt.begin(), exempt.end(), g.layer) != exempt.end()) {
            continue;
        }
        const double u = static_cast<double>(next_random(rng) >> 11) * 0x1.0p-53;
        table.entries.push_back({g.kind, g.layer, g.index, group_param_count(model.config, g.kind), u});
    }
    const double ratio = max_ratio * static_cast<double>(next_random(rng) >> 11) * 0x1.0p-53;
    return select_prune_groups(table, model.config, ratio, exempt);
}

}  // namespace rlrc::testing
