#include "rlrc/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlrc {

using nlohmann::json;

namespace {

void require_single_token(const ModelConfig & c) {
    if (c.tokens_per_action != 1) {
        throw Error("environment-coupled policies need tokens_per_action=1, model has " +
                    std::to_string(c.tokens_per_action));
    }
}

std::vector<int> first_tokens(const std::vector<SampledAction> & sampled) {
    std::vector<int> out;
    out.reserve(sampled.size());
    for (const auto & s : sampled) {
        out.push_back(s.actions.front());
    }
    return out;
}

Action walk(int fx, int fy, int tx, int ty) {
    if (fx < tx) {
        return Action::Right;
    }
    if (fx > tx) {
        return Action::Left;
    }
    return fy < ty ? Action::Down : Action::Up;
}

void shuffle(std::vector<std::size_t> & idx, std::uint64_t & rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[uniform_below(rng, i)]);
    }
}

}  // namespace

PolicyFn greedy_policy(const PolicyModel & model) {
    require_single_token(model.config);
    return [&model](const std::vector<Observation> & obs) {
        std::uint64_t rng = 0;
        return first_tokens(sample_actions(model, obs, SampleMode::Greedy(), rng));
    };
}

PolicyFn greedy_policy(const QuantizedModel & model) {
    require_single_token(model.config());
    return [&model](const std::vector<Observation> & obs) {
        std::uint64_t rng = 0;
        return first_tokens(sample_actions(model, obs, SampleMode::Greedy(), rng));
    };
}

PolicyFn expert_observation_policy(const EnvConfig & env) {
    const TokenLayout L{env.width, env.height};
    return [L](const std::vector<Observation> & obs) {
        std::vector<int> out;
        out.reserve(obs.size());
        for (const auto & o : obs) {
            const int gx = o[2] - L.x_token(0), gy = o[3] - L.y_token(0);
            const int tx = o[4] - L.x_token(0), ty = o[5] - L.y_token(0);
            const int px = o[6] - L.x_token(0), py = o[7] - L.y_token(0);
            const int holding = o[8] - L.holding_token(0);
            Action a;
            if (holding == 2) {
                a = Action::Release;
            } else if (holding == 0) {
                a = (gx == tx && gy == ty) ? Action::Grasp : walk(gx, gy, tx, ty);
            } else {
                a = (gx == px && gy == py) ? Action::Release : walk(gx, gy, px, py);
            }
            out.push_back(static_cast<int>(a));
        }
        return out;
    };
}

EvalResult evaluate(const PolicyFn & policy, std::span<const TaskSpec> tasks, int episodes_per_task,
                    std::uint64_t seed, const EnvConfig & env) {
    if (episodes_per_task < 1) {
        throw Error("evaluation needs at least one episode per task");
    }
    std::vector<EnvState> states;
    for (const auto & task : tasks) {
        const std::uint64_t task_seed = mix_seed(seed, static_cast<std::uint64_t>(task.id()) + 1000);
        for (int e = 0; e < episodes_per_task; ++e) {
            states.push_back(reset(task, mix_seed(task_seed, static_cast<std::uint64_t>(e)), env));
        }
    }
    EvalResult r;
    r.episodes = states.size();
    if (states.empty()) {
        return r;
    }
    std::vector<double> returns(states.size(), 0.0);
    std::vector<std::size_t> active(states.size());
    std::iota(active.begin(), active.end(), 0);
    while (!active.empty()) {
        std::vector<Observation> obs;
        obs.reserve(active.size());
        for (std::size_t i : active) {
            obs.push_back(observe(states[i]));
        }
        const std::vector<int> actions = policy(obs);
        if (actions.size() != active.size()) {
            throw Error("policy returned " + std::to_string(actions.size()) + " actions for " +
                        std::to_string(active.size()) + " observations");
        }
        std::vector<std::size_t> still;
        for (std::size_t j = 0; j < active.size(); ++j) {
            const std::size_t i = active[j];
            if (actions[j] < 0 || actions[j] >= kNumActions) {
                throw Error("policy produced invalid action " + std::to_string(actions[j]));
            }
            returns[i] += step(states[i], static_cast<Action>(actions[j])).reward;
            if (!states[i].done) {
                still.push_back(i);
            }
        }
        active = std::move(still);
    }
    double succ = 0.0, ret = 0.0, len = 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
        succ += states[i].success ? 1.0 : 0.0;
        ret += returns[i];
        len += states[i].t;
    }
    const double n = static_cast<double>(states.size());
    r.success_rate = succ / n;
    r.mean_return = ret / n;
    r.mean_length = len / n;
    return r;
}

// ---- SFT ------------------------------------------------------------------

std::vector<SftSample> flatten_demos(std::span<const Demonstration> demos) {
    std::vector<SftSample> out;
    for (const auto & d : demos) {
        for (const auto & s : d.steps) {
            out.push_back({s.obs, {s.action}});
        }
    }
    return out;
}

Var sft_loss(Tape & tape, const PolicyModel & model, std::span<const SftSample> batch) {
    if (batch.empty()) {
        throw Error("sft_loss on an empty batch");
    }
    std::vector<Observation> obs;
    std::vector<std::vector<int>> actions;
    obs.reserve(batch.size());
    actions.reserve(batch.size());
    for (const auto & s : batch) {
        obs.push_back(s.obs);
        actions.push_back(s.actions);
    }
    Var lp = action_logprob(tape, model, obs, actions);
    return ad::scale(ad::mean(lp), -1.0f);
}

SftResult train_sft(PolicyModel & model, std::span<const Demonstration> demos, const SftConfig & config,
                    std::span<const TaskSpec> eval_tasks, const EnvConfig & env, const MetricSink & sink) {
    const std::vector<SftSample> samples = flatten_demos(demos);
    if (samples.empty()) {
        throw Error("SFT needs at least one demonstration step");
    }
    if (config.batch_size == 0 || config.eval_interval == 0) {
        throw Error("SFT batch_size and eval_interval must be positive");
    }
    const bool do_eval = !eval_tasks.empty();
    if (do_eval) {
        require_single_token(model.config);
    }
    model.set_requires_grad(true);
    Adam opt(model.parameters(), {config.learning_rate, 0.9f, 0.999f, 1e-8f, config.max_grad_norm});
    std::uint64_t rng = mix_seed(config.seed, 0x5f7);
    const std::uint64_t eval_seed = mix_seed(config.seed, 0xe7a1);

    SftResult result;
    std::optional<PolicyModel> best;
    std::size_t stale = 0;
    auto run_eval = [&](std::size_t step, double loss) {
        const double sr = evaluate(greedy_policy(model), eval_tasks, config.eval_episodes_per_task, eval_seed, env)
                              .success_rate;
        if (sr > result.best_success) {
            result.best_success = sr;
            result.best_step = step;
            best = model;
            stale = 0;
        } else {
            ++stale;
        }
        result.curve.push_back({step, loss, sr});
        if (sink) {
            sink(json{{"phase", "sft"}, {"step", step}, {"loss", loss}, {"ind_sr", sr}});
        }
        return result.best_success >= config.target_success || (config.patience > 0 && stale >= config.patience);
    };

    bool stop = do_eval && run_eval(0, 0.0);
    std::vector<SftSample> batch(config.batch_size);
    for (std::size_t s = 1; s <= config.max_steps && !stop; ++s) {
        for (auto & b : batch) {
            b = samples[uniform_below(rng, samples.size())];
        }
        Tape tape;
        Var loss = sft_loss(tape, model, batch);
        tape.backward(loss);
        opt.step();
        const double lv = loss.item();
        result.final_loss = lv;
        result.steps_run = s;
        if (do_eval && (s % config.eval_interval == 0 || s == config.max_steps)) {
            stop = run_eval(s, lv);
        } else if (s % config.eval_interval == 0 || s == 1) {
            result.curve.push_back({s, lv, -1.0});
            if (sink) {
                sink(json{{"phase", "sft"}, {"step", s}, {"loss", lv}});
            }
        }
    }
    if (best) {
        model = std::move(*best);
    }
    model.set_requires_grad(false);
    return result;
}

// ---- PPO ------------------------------------------------------------------

void PpoConfig::validate() const {
    auto fail = [](const std::string & what) { throw Error("invalid PPO config: " + what); };
    if (!(gamma >= 0.0f && gamma <= 1.0f)) {
        fail("gamma must be in [0, 1]");
    }
    if (!(gae_lambda >= 0.0f && gae_lambda <= 1.0f)) {
        fail("gae_lambda must be in [0, 1]");
    }
    if (!(clip_eps > 0.0f && clip_eps < 1.0f)) {
        fail("clip_eps must be in (0, 1)");
    }
    if (epochs == 0 || minibatches == 0 || num_envs == 0 || horizon == 0) {
        fail("epochs, minibatches, num_envs and horizon must be positive");
    }
    if (num_envs * horizon < minibatches) {
        fail("fewer transitions per rollout than minibatches");
    }
    if (!(learning_rate >= 0.0f)) {
        fail("learning_rate must be non-negative");
    }
}

TrajectoryBuffer collect_rollouts(const PolicyModel & model, const ValueHead & head, VecEnv & env, std::size_t horizon,
                                  std::uint64_t & rng) {
    const std::size_t N = env.size();
    TrajectoryBuffer buf;
    buf.num_envs = N;
    buf.horizon = horizon;
    buf.transitions.reserve(N * horizon);
    for (std::size_t t = 0; t < horizon; ++t) {
        std::vector<Observation> obs = env.observations();
        std::vector<int> task_ids(N);
        for (std::size_t i = 0; i < N; ++i) {
            task_ids[i] = env.state(i).task.id();
        }
        const ActorCriticStep ac = act(model, head, obs, SampleMode::Stochastic(1.0f), rng);
        std::vector<Action> actions(N);
        for (std::size_t i = 0; i < N; ++i) {
            actions[i] = static_cast<Action>(ac.actions[i]);
        }
        std::vector<StepResult> results = env.step(actions);

        std::vector<Observation> trunc_obs;
        std::vector<std::size_t> trunc_idx;
        for (std::size_t i = 0; i < N; ++i) {
            Transition tr;
            tr.obs = std::move(obs[i]);
            tr.actions = {ac.actions[i]};
            tr.log_prob = ac.log_probs[i];
            tr.value = ac.values[i];
            tr.reward = results[i].reward;
            tr.task_id = task_ids[i];
            if (results[i].done) {
                ++buf.episodes_finished;
                buf.successes += results[i].placed_now ? 1 : 0;
                if (results[i].truncated && !results[i].placed_now) {
                    tr.end = EpisodeEnd::Truncated;
                    trunc_obs.push_back(results[i].obs);
                    trunc_idx.push_back(buf.transitions.size());
                } else {
                    tr.end = EpisodeEnd::Terminal;
                }
            }
            buf.transitions.push_back(std::move(tr));
        }
        if (!trunc_obs.empty()) {
            Tape tape(false);
            const Var v = value(tape, model, head, trunc_obs);
            for (std::size_t j = 0; j < trunc_idx.size(); ++j) {
                buf.transitions[trunc_idx[j]].terminal_value = v.value()[j];
            }
        }
    }
    Tape tape(false);
    const Var v = value(tape, model, head, env.observations());
    buf.bootstrap_values.assign(v.value().data().begin(), v.value().data().end());
    return buf;
}

GaeResult compute_gae(std::span<const float> rewards, std::span<const float> values, std::span<const EpisodeEnd> ends,
                      std::span<const float> terminal_values, float bootstrap, float gamma, float lambda) {
    const std::size_t T = rewards.size();
    if (values.size() != T || ends.size() != T || terminal_values.size() != T) {
        throw ShapeError("compute_gae: rewards, values, ends and terminal_values must have equal length");
    }
    GaeResult r;
    r.advantages.assign(T, 0.0f);
    r.returns.assign(T, 0.0f);
    double gae = 0.0;
    for (std::size_t t = T; t-- > 0;) {
        double next_value;
        double carry;
        switch (ends[t]) {
            case EpisodeEnd::Terminal:
                next_value = 0.0;
                carry = 0.0;
                break;
            case EpisodeEnd::Truncated:
                next_value = terminal_values[t];
                carry = 0.0;
                break;
            default:
                next_value = t + 1 < T ? values[t + 1] : bootstrap;
                carry = t + 1 < T ? 1.0 : 0.0;
                break;
        }
        const double delta = rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lambda * carry * gae;
        r.advantages[t] = static_cast<float>(gae);
        r.returns[t] = static_cast<float>(gae + values[t]);
    }
    return r;
}

void compute_gae(TrajectoryBuffer & buffer, float gamma, float lambda) {
    const std::size_t N = buffer.num_envs, H = buffer.horizon;
    if (buffer.transitions.size() != N * H || buffer.bootstrap_values.size() != N) {
        throw ShapeError("trajectory buffer has " + std::to_string(buffer.transitions.size()) + " transitions for " +
                         std::to_string(N) + " envs x " + std::to_string(H) + " steps");
    }
    buffer.advantages.assign(N * H, 0.0f);
    buffer.returns.assign(N * H, 0.0f);
    std::vector<float> rw(H), v(H), tv(H);
    std::vector<EpisodeEnd> ends(H);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t t = 0; t < H; ++t) {
            const Transition & tr = buffer.transitions[t * N + i];
            rw[t] = tr.reward;
            v[t] = tr.value;
            ends[t] = tr.end;
            tv[t] = tr.terminal_value;
        }
        const GaeResult g = compute_gae(rw, v, ends, tv, buffer.bootstrap_values[i], gamma, lambda);
        for (std::size_t t = 0; t < H; ++t) {
            buffer.advantages[t * N + i] = g.advantages[t];
            buffer.returns[t * N + i] = g.returns[t];
        }
    }
}

std::vector<float> normalize_advantages(std::span<const float> advantages) {
    std::vector<float> out(advantages.begin(), advantages.end());
    if (out.empty()) {
        return out;
    }
    double mean = 0.0;
    for (float a : advantages) {
        mean += a;
    }
    mean /= static_cast<double>(advantages.size());
    double var = 0.0;
    for (float a : advantages) {
        var += (a - mean) * (a - mean);
    }
    var /= static_cast<double>(advantages.size());
    const double sd = std::sqrt(var) + 1e-8;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>((advantages[i] - mean) / sd);
    }
    return out;
}

PpoUpdateStats ppo_update(PolicyModel & model, ValueHead & head, Adam & optimizer, const TrajectoryBuffer & buffer,
                          const PpoConfig & config, std::uint64_t & rng) {
    const std::size_t n = buffer.transitions.size();
    if (buffer.advantages.size() != n || buffer.returns.size() != n) {
        throw Error("ppo_update: advantages/returns missing; run compute_gae first");
    }
    const std::vector<float> adv = normalize_advantages(buffer.advantages);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t mb = n / config.minibatches;

    PpoUpdateStats st;
    std::size_t count = 0;
    bool first = true;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t m = 0; m < config.minibatches; ++m) {
            const std::size_t begin = m * mb;
            const std::size_t end = m + 1 == config.minibatches ? n : begin + mb;
            std::vector<Observation> obs;
            std::vector<std::vector<int>> actions;
            std::vector<float> old_lp, a, ret;
            for (std::size_t j = begin; j < end; ++j) {
                const Transition & tr = buffer.transitions[order[j]];
                obs.push_back(tr.obs);
                actions.push_back(tr.actions);
                old_lp.push_back(tr.log_prob);
                a.push_back(adv[order[j]]);
                ret.push_back(buffer.returns[order[j]]);
            }
            const std::size_t B = obs.size();
            Tape tape;
            PolicyEval pe = evaluate_policy(tape, model, head, obs, actions, config.stop_critic_gradient);
            Var surr = ad::ppo_clipped_surrogate(pe.log_prob, old_lp, a, config.clip_eps);
            Var vloss = ad::mean(ad::square(ad::sub(pe.value, tape.constant(Tensor({B}, ret)))));
            Var ent = ad::mean(pe.entropy);
            Var loss = ad::sub(ad::add(ad::scale(surr, -1.0f), ad::scale(vloss, config.value_coef)),
                               ad::scale(ent, config.entropy_coef));
            if (!std::isfinite(loss.item())) {
                throw NumericError("PPO loss diverged (non-finite) at epoch " + std::to_string(epoch));
            }
            tape.backward(loss);
            optimizer.step();

            double kl = 0.0, clipped = 0.0, maxdev = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double d = static_cast<double>(pe.log_prob.value()[b]) - old_lp[b];
                const double r = std::exp(d);
                kl += -d;
                clipped += std::abs(r - 1.0) > config.clip_eps ? 1.0 : 0.0;
                maxdev = std::max(maxdev, std::abs(r - 1.0));
            }
            if (first) {
                st.first_minibatch_max_ratio_dev = maxdev;
                first = false;
            }
            st.policy_loss += -surr.item();
            st.value_loss += vloss.item();
            st.entropy += ent.item();
            st.approx_kl += kl / static_cast<double>(B);
            st.clip_fraction += clipped / static_cast<double>(B);
            ++count;
        }
    }
    const double c = static_cast<double>(count);
    st.policy_loss /= c;
    st.value_loss /= c;
    st.entropy /= c;
    st.approx_kl /= c;
    st.clip_fraction /= c;
    return st;
}

PpoResult train_ppo(PolicyModel & model, ValueHead & head, std::span<const TaskSpec> train_tasks,
                    std::span<const TaskSpec> eval_ood, const PpoConfig & config, const EnvConfig & env,
                    const MetricSink & sink) {
    config.validate();
    require_single_token(model.config);
    if (train_tasks.empty()) {
        throw Error("PPO needs at least one training task");
    }
    for (const auto & t : train_tasks) {
        if (t.split != Split::IND) {
            throw Error("PPO training task (object " + std::to_string(t.object_type) + ", plate " +
                        std::to_string(t.plate_id) + ") is OOD; OOD tasks are evaluation-only");
        }
    }
    if (head.w1.rank() != 2 || head.w1.dim(0) != model.config.d_model) {
        throw ShapeError("value head input width does not match d_model " + std::to_string(model.config.d_model));
    }
    model.set_requires_grad(true);
    std::vector<Tensor *> params = model.parameters();
    for (Tensor * t : head.parameters()) {
        t->set_requires_grad(true);
        params.push_back(t);
    }
    Adam opt(params, {config.learning_rate, 0.9f, 0.999f, 1e-8f, config.max_grad_norm});
    VecEnv venv(std::vector<TaskSpec>(train_tasks.begin(), train_tasks.end()), config.num_envs,
                mix_seed(config.seed, 0xe4f), env);
    std::uint64_t act_rng = mix_seed(config.seed, 0xac7);
    std::uint64_t mb_rng = mix_seed(config.seed, 0x5b);
    const std::uint64_t eval_seed = mix_seed(config.seed, 0xe7a2);

    const std::size_t per_update = config.num_envs * config.horizon;
    const std::size_t updates = std::max<std::size_t>(1, (config.total_env_steps + per_update - 1) / per_update);
    PpoResult result;
    for (std::size_t u = 1; u <= updates; ++u) {
        TrajectoryBuffer buf = collect_rollouts(model, head, venv, config.horizon, act_rng);
        compute_gae(buf, config.gamma, config.gae_lambda);
        PpoPoint pt;
        pt.stats = ppo_update(model, head, opt, buf, config, mb_rng);
        result.env_steps += per_update;
        result.updates = u;
        pt.env_steps = result.env_steps;
        pt.update = u;
        pt.rollout_success_rate = buf.episodes_finished
                                      ? static_cast<double>(buf.successes) / static_cast<double>(buf.episodes_finished)
                                      : 0.0;
        if ((config.eval_interval && u % config.eval_interval == 0) || u == updates) {
            pt.ind_success =
                evaluate(greedy_policy(model), train_tasks, config.eval_episodes_per_task, eval_seed, env).success_rate;
            if (!eval_ood.empty()) {
                pt.ood_success =
                    evaluate(greedy_policy(model), eval_ood, config.eval_episodes_per_task, eval_seed, env).success_rate;
            }
        }
        if (sink) {
            json j{{"phase", "rl"},
                   {"update", u},
                   {"env_steps", pt.env_steps},
                   {"rollout_success", pt.rollout_success_rate},
                   {"policy_loss", pt.stats.policy_loss},
                   {"value_loss", pt.stats.value_loss},
                   {"entropy", pt.stats.entropy},
                   {"approx_kl", pt.stats.approx_kl},
                   {"clip_fraction", pt.stats.clip_fraction},
                   {"first_ratio_dev", pt.stats.first_minibatch_max_ratio_dev}};
            if (pt.ind_success >= 0.0) {
                j["ind_sr"] = pt.ind_success;
            }
            if (pt.ood_success >= 0.0) {
                j["ood_sr"] = pt.ood_success;
            }
            sink(j);
        }
        result.curve.push_back(pt);
    }
    model.set_requires_grad(false);
    for (Tensor * t : head.parameters()) {
        t->set_requires_grad(false);
    }
    return result;
}

}  // namespace rlrc
