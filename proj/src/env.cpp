#include "rlrc/env.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rlrc {

using nlohmann::json;

std::uint64_t next_random(std::uint64_t & state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (b * 0xD1B54A32D192ED03ull);
    next_random(s);
    return next_random(s);
}

std::uint64_t uniform_below(std::uint64_t & state, std::uint64_t n) {
    const unsigned __int128 wide = static_cast<unsigned __int128>(next_random(state)) * n;
    return static_cast<std::uint64_t>(wide >> 64);
}

const char * split_name(Split s) {
    return s == Split::IND ? "IND" : "OOD";
}

Split parse_split(const std::string & s) {
    if (s == "IND") {
        return Split::IND;
    }
    if (s == "OOD") {
        return Split::OOD;
    }
    throw Error("unknown split '" + s + "'");
}

const char * action_name(Action a) {
    switch (a) {
        case Action::Up: return "up";
        case Action::Down: return "down";
        case Action::Left: return "left";
        case Action::Right: return "right";
        case Action::Grasp: return "grasp";
        case Action::Release: return "release";
    }
    return "?";
}

TaskSuite make_task_suite(std::uint64_t seed) {
    std::vector<int> ids(kNumObjectTypes * kNumPlateIds);
    std::uint64_t rng = mix_seed(seed, 0x5017E);
    for (int attempt = 0;; ++attempt) {
        std::iota(ids.begin(), ids.end(), 0);
        for (std::size_t i = ids.size(); i > 1; --i) {
            std::swap(ids[i - 1], ids[uniform_below(rng, i)]);
        }
        std::array<bool, kNumObjectTypes> obj_seen{};
        std::array<bool, kNumPlateIds> plate_seen{};
        for (int k = 0; k < 16; ++k) {
            obj_seen[ids[k] / kNumPlateIds] = true;
            plate_seen[ids[k] % kNumPlateIds] = true;
        }
        const bool covered = std::all_of(obj_seen.begin(), obj_seen.end(), [](bool b) { return b; }) &&
                             std::all_of(plate_seen.begin(), plate_seen.end(), [](bool b) { return b; });
        if (covered) {
            break;
        }
    }
    std::sort(ids.begin(), ids.begin() + 16);
    std::sort(ids.begin() + 16, ids.end());
    TaskSuite suite;
    for (int k = 0; k < 25; ++k) {
        TaskSpec t{ids[k] / kNumPlateIds, ids[k] % kNumPlateIds, k < 16 ? Split::IND : Split::OOD};
        (k < 16 ? suite.ind : suite.ood).push_back(t);
    }
    return suite;
}

EnvState reset(const TaskSpec & task, std::uint64_t episode_seed, const EnvConfig & config) {
    if (task.object_type < 0 || task.object_type >= kNumObjectTypes || task.plate_id < 0 ||
        task.plate_id >= kNumPlateIds) {
        throw Error("invalid task (object " + std::to_string(task.object_type) + ", plate " +
                    std::to_string(task.plate_id) + ")");
    }
    if (config.distractors < 0 || config.distractors > kNumObjectTypes - 1 || config.distractors > 2) {
        throw Error("distractor count must be in [0, 2], got " + std::to_string(config.distractors));
    }
    if (config.max_steps < 1) {
        throw Error("max_steps must be >= 1");
    }
    const int entities = 1 + 1 + config.distractors + 1;  // gripper, target, distractors, plate
    if (config.width < 1 || config.height < 1 || config.width * config.height < entities) {
        throw Error("grid " + std::to_string(config.width) + "x" + std::to_string(config.height) +
                    " too small to place " + std::to_string(entities) + " entities");
    }
    std::uint64_t rng = mix_seed(episode_seed, static_cast<std::uint64_t>(task.id()) + 1);

    const int cells = config.width * config.height;
    std::vector<int> order(static_cast<std::size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first `entities` cells are distinct picks.
    for (int i = 0; i < entities; ++i) {
        const auto j = static_cast<std::size_t>(i) + uniform_below(rng, static_cast<std::uint64_t>(cells - i));
        std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }
    auto cell_of = [&](int k) { return Cell{order[static_cast<std::size_t>(k)] % config.width, order[static_cast<std::size_t>(k)] / config.width}; };

    EnvState s;
    s.config = config;
    s.task = task;
    s.episode_seed = episode_seed;
    s.gripper = cell_of(0);
    s.objects.push_back({task.object_type, cell_of(1), false});
    std::vector<int> other_types;
    for (int ty = 0; ty < kNumObjectTypes; ++ty) {
        if (ty != task.object_type) {
            other_types.push_back(ty);
        }
    }
    for (int d = 0; d < config.distractors; ++d) {
        const auto k = uniform_below(rng, other_types.size());
        s.objects.push_back({other_types[k], cell_of(2 + d), false});
        other_types.erase(other_types.begin() + static_cast<std::ptrdiff_t>(k));
    }
    s.plates.push_back({task.plate_id, cell_of(2 + config.distractors)});
    return s;
}

Observation observe(const EnvState & s) {
    const TokenLayout L{s.config.width, s.config.height};
    Observation o;
    o.reserve(TokenLayout::observation_length);
    o.push_back(L.object_token(s.task.object_type));
    o.push_back(L.plate_token(s.task.plate_id));
    o.push_back(L.x_token(s.gripper.x));
    o.push_back(L.y_token(s.gripper.y));
    o.push_back(L.x_token(s.objects[0].pos.x));
    o.push_back(L.y_token(s.objects[0].pos.y));
    o.push_back(L.x_token(s.plates[0].pos.x));
    o.push_back(L.y_token(s.plates[0].pos.y));
    o.push_back(L.holding_token(!s.holding ? 0 : (*s.holding == 0 ? 1 : 2)));
    for (std::size_t d = 1; d <= 2; ++d) {
        if (d < s.objects.size()) {
            o.push_back(L.object_token(s.objects[d].type));
            o.push_back(L.x_token(s.objects[d].pos.x));
            o.push_back(L.y_token(s.objects[d].pos.y));
        } else {
            o.insert(o.end(), 3, TokenLayout::null_token);
        }
    }
    return o;
}

StepResult step(EnvState & s, Action action) {
    if (s.done) {
        throw Error("step() after episode end");
    }
    StepResult r;
    ++s.t;
    auto move = [&](int dx, int dy) {
        s.gripper.x = std::clamp(s.gripper.x + dx, 0, s.config.width - 1);
        s.gripper.y = std::clamp(s.gripper.y + dy, 0, s.config.height - 1);
        if (s.holding) {
            s.objects[*s.holding].pos = s.gripper;
        }
    };
    switch (action) {
        case Action::Up: move(0, -1); break;
        case Action::Down: move(0, 1); break;
        case Action::Left: move(-1, 0); break;
        case Action::Right: move(1, 0); break;
        case Action::Grasp:
            if (!s.holding) {
                for (std::size_t i = 0; i < s.objects.size(); ++i) {
                    if (s.objects[i].pos == s.gripper) {
                        s.holding = i;
                        s.objects[i].on_plate = false;
                        if (i == 0 && !s.target_grasped_once) {
                            s.target_grasped_once = true;
                            r.grasped_now = true;
                            r.reward = 0.1f;
                        }
                        break;
                    }
                }
            }
            break;
        case Action::Release:
            if (s.holding) {
                const std::size_t i = *s.holding;
                s.holding.reset();
                s.objects[i].pos = s.gripper;
                s.objects[i].on_plate = std::any_of(s.plates.begin(), s.plates.end(),
                                                    [&](const PlateState & p) { return p.pos == s.gripper; });
                if (i == 0 && s.gripper == s.plates[0].pos) {
                    r.placed_now = true;
                    r.reward = 1.0f;
                    s.done = true;
                    s.success = true;
                }
            }
            break;
        default: throw Error("invalid action id " + std::to_string(static_cast<int>(action)));
    }
    if (!s.done && s.t >= s.config.max_steps) {
        r.truncated = true;
        s.done = true;
    }
    r.done = s.done;
    r.obs = observe(s);
    return r;
}

namespace {

Action walk_towards(Cell from, Cell to) {
    if (from.x < to.x) {
        return Action::Right;
    }
    if (from.x > to.x) {
        return Action::Left;
    }
    return from.y < to.y ? Action::Down : Action::Up;
}

}  // namespace

Action expert_policy(const EnvState & s) {
    if (s.holding && *s.holding != 0) {
        return Action::Release;
    }
    if (!s.holding) {
        const Cell target = s.objects[0].pos;
        return s.gripper == target ? Action::Grasp : walk_towards(s.gripper, target);
    }
    const Cell plate = s.plates[0].pos;
    return s.gripper == plate ? Action::Release : walk_towards(s.gripper, plate);
}

std::string render_ascii(const EnvState & s) {
    std::vector<std::string> rows(static_cast<std::size_t>(s.config.height), std::string(static_cast<std::size_t>(s.config.width), '.'));
    auto put = [&](Cell c, char ch) { rows[static_cast<std::size_t>(c.y)][static_cast<std::size_t>(c.x)] = ch; };
    for (const auto & p : s.plates) {
        put(p.pos, 'P');
    }
    for (std::size_t i = s.objects.size(); i-- > 0;) {
        put(s.objects[i].pos, i == 0 ? 'T' : static_cast<char>('a' + s.objects[i].type));
    }
    put(s.gripper, s.holding ? 'G' : 'g');
    std::ostringstream os;
    os << "task obj=" << s.task.object_type << " plate=" << s.task.plate_id << " t=" << s.t << '/' << s.config.max_steps
       << (s.done ? (s.success ? " [success]" : " [done]") : "") << '\n';
    for (const auto & row : rows) {
        os << row << '\n';
    }
    return os.str();
}

Demonstration record_expert_episode(const TaskSpec & task, std::uint64_t episode_seed, const EnvConfig & config) {
    Demonstration d;
    d.task = task;
    d.seed = episode_seed;
    EnvState s = reset(task, episode_seed, config);
    Observation obs = observe(s);
    while (!s.done) {
        const Action a = expert_policy(s);
        d.steps.push_back({obs, static_cast<int>(a)});
        obs = step(s, a).obs;
    }
    d.success = s.success;
    return d;
}

std::vector<Demonstration> make_demos(std::span<const TaskSpec> tasks, int episodes_per_task, std::uint64_t seed,
                                      const EnvConfig & config) {
    if (episodes_per_task < 1) {
        throw Error("episodes_per_task must be >= 1");
    }
    for (const auto & t : tasks) {
        if (t.split != Split::IND) {
            throw Error("demonstrations requested for OOD task (object " + std::to_string(t.object_type) + ", plate " +
                        std::to_string(t.plate_id) + "); OOD tasks must stay unseen");
        }
    }
    std::vector<Demonstration> demos;
    demos.reserve(tasks.size() * static_cast<std::size_t>(episodes_per_task));
    for (const auto & t : tasks) {
        for (int e = 0; e < episodes_per_task; ++e) {
            const std::uint64_t ep_seed = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(t.id())), static_cast<std::uint64_t>(e));
            demos.push_back(record_expert_episode(t, ep_seed, config));
        }
    }
    return demos;
}

namespace {

json task_to_json(const TaskSpec & t) {
    return json{{"object", t.object_type}, {"plate", t.plate_id}, {"split", split_name(t.split)}};
}

TaskSpec task_from_json(const json & j) {
    TaskSpec t{j.at("object").get<int>(), j.at("plate").get<int>(), parse_split(j.at("split").get<std::string>())};
    if (t.object_type < 0 || t.object_type >= kNumObjectTypes || t.plate_id < 0 || t.plate_id >= kNumPlateIds) {
        throw Error("task out of range in file: " + j.dump());
    }
    return t;
}

}  // namespace

void write_demos(const std::vector<Demonstration> & demos, const std::string & path) {
    std::ofstream f(path);
    if (!f) {
        throw Error("cannot open demo file for writing: " + path);
    }
    for (const auto & d : demos) {
        json steps = json::array();
        for (const auto & s : d.steps) {
            steps.push_back(json{{"obs", s.obs}, {"action", s.action}});
        }
        json rec{{"task", task_to_json(d.task)}, {"seed", d.seed}, {"steps", std::move(steps)}, {"success", d.success}};
        f << rec.dump() << '\n';
    }
    if (!f) {
        throw Error("write failed for demo file: " + path);
    }
}

std::vector<Demonstration> read_demos(const std::string & path) {
    std::ifstream f(path);
    if (!f) {
        throw Error("cannot open demo file: " + path);
    }
    std::vector<Demonstration> demos;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            Demonstration d;
            d.task = task_from_json(j.at("task"));
            d.seed = j.at("seed").get<std::uint64_t>();
            d.success = j.at("success").get<bool>();
            for (const auto & s : j.at("steps")) {
                d.steps.push_back({s.at("obs").get<Observation>(), s.at("action").get<int>()});
            }
            demos.push_back(std::move(d));
        } catch (const json::exception & e) {
            throw Error(path + ":" + std::to_string(lineno) + ": malformed demonstration: " + e.what());
        }
    }
    return demos;
}

std::vector<Demonstration> generate_demos(std::span<const TaskSpec> tasks, int episodes_per_task, std::uint64_t seed,
                                          const std::string & out_path, const EnvConfig & config) {
    auto demos = make_demos(tasks, episodes_per_task, seed, config);
    write_demos(demos, out_path);
    return demos;
}

void write_suite(const TaskSuite & suite, const std::string & path) {
    json j{{"IND", json::array()}, {"OOD", json::array()}};
    for (const auto & t : suite.ind) {
        j["IND"].push_back(task_to_json(t));
    }
    for (const auto & t : suite.ood) {
        j["OOD"].push_back(task_to_json(t));
    }
    std::ofstream f(path);
    if (!f) {
        throw Error("cannot open suite file for writing: " + path);
    }
    f << j.dump(2) << '\n';
}

TaskSuite read_suite(const std::string & path) {
    std::ifstream f(path);
    if (!f) {
        throw Error("cannot open suite file: " + path);
    }
    try {
        const json j = json::parse(f);
        TaskSuite s;
        for (const auto & t : j.at("IND")) {
            s.ind.push_back(task_from_json(t));
        }
        for (const auto & t : j.at("OOD")) {
            s.ood.push_back(task_from_json(t));
        }
        return s;
    } catch (const json::exception & e) {
        throw Error(path + ": malformed suite file: " + e.what());
    }
}

VecEnv::VecEnv(std::vector<TaskSpec> tasks, std::size_t num_envs, std::uint64_t seed, EnvConfig config)
    : tasks_(std::move(tasks)), config_(config) {
    if (num_envs == 0) {
        throw Error("VecEnv batch size must be >= 1");
    }
    if (tasks_.empty()) {
        throw Error("VecEnv requires at least one task");
    }
    streams_.resize(num_envs);
    states_.resize(num_envs);
    for (std::size_t i = 0; i < num_envs; ++i) {
        streams_[i] = mix_seed(seed, i);
        start_episode(i);
    }
}

void VecEnv::start_episode(std::size_t i) {
    const auto task = tasks_[uniform_below(streams_[i], tasks_.size())];
    const std::uint64_t ep_seed = next_random(streams_[i]);
    states_[i] = reset(task, ep_seed, config_);
    ++episodes_started_;
}

std::vector<Observation> VecEnv::observations() const {
    std::vector<Observation> out;
    out.reserve(states_.size());
    for (const auto & s : states_) {
        out.push_back(observe(s));
    }
    return out;
}

std::vector<StepResult> VecEnv::step(std::span<const Action> actions) {
    if (actions.size() != states_.size()) {
        throw Error("VecEnv::step got " + std::to_string(actions.size()) + " actions for " +
                    std::to_string(states_.size()) + " envs");
    }
    std::vector<StepResult> results;
    results.reserve(states_.size());
    for (std::size_t i = 0; i < states_.size(); ++i) {
        results.push_back(rlrc::step(states_[i], actions[i]));
        if (results.back().done) {
            start_episode(i);
        }
    }
    return results;
}

}  // namespace rlrc
