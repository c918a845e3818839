#include "rlrc/env.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace rlrc;

namespace {

std::vector<TaskSpec> all_tasks() {
    const TaskSuite s = make_task_suite(0);
    std::vector<TaskSpec> out = s.ind;
    out.insert(out.end(), s.ood.begin(), s.ood.end());
    return out;
}

std::string temp_path(const std::string & name) {
    return (std::filesystem::temp_directory_path() / ("rlrc_test_" + name)).string();
}

// A cell that is not occupied by any entity.
Cell free_cell(const EnvState & s) {
    for (int y = 0; y < s.config.height; ++y) {
        for (int x = 0; x < s.config.width; ++x) {
            const Cell c{x, y};
            bool used = c == s.gripper;
            for (const auto & o : s.objects) {
                used = used || o.pos == c;
            }
            for (const auto & p : s.plates) {
                used = used || p.pos == c;
            }
            if (!used) {
                return c;
            }
        }
    }
    return {};
}

}  // namespace

TEST(TaskSuite, SplitSizesAndCoverage) {
    for (std::uint64_t seed : {0u, 1u, 7u}) {
        const TaskSuite s = make_task_suite(seed);
        ASSERT_EQ(s.ind.size(), 16u);
        ASSERT_EQ(s.ood.size(), 9u);
        std::set<int> ids, objects, plates;
        for (const auto & t : s.ind) {
            EXPECT_EQ(t.split, Split::IND);
            ids.insert(t.id());
            objects.insert(t.object_type);
            plates.insert(t.plate_id);
        }
        for (const auto & t : s.ood) {
            EXPECT_EQ(t.split, Split::OOD);
            EXPECT_FALSE(ids.count(t.id()));
            ids.insert(t.id());
        }
        EXPECT_EQ(ids.size(), 25u);
        EXPECT_EQ(objects.size(), 5u);
        EXPECT_EQ(plates.size(), 5u);
    }
}

TEST(TaskSuite, DeterministicPerSeed) {
    const TaskSuite a = make_task_suite(3), b = make_task_suite(3);
    EXPECT_EQ(a.ind, b.ind);
    EXPECT_EQ(a.ood, b.ood);
}

TEST(Env, ResetIsDeterministicWithDistinctCells) {
    const TaskSpec task{2, 3, Split::IND};
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const EnvState a = reset(task, seed), b = reset(task, seed);
        EXPECT_EQ(observe(a), observe(b));
        std::set<std::pair<int, int>> cells{{a.gripper.x, a.gripper.y}};
        for (const auto & o : a.objects) {
            cells.insert({o.pos.x, o.pos.y});
            EXPECT_NE(o.type == task.object_type, &o != &a.objects[0]);
        }
        for (const auto & p : a.plates) {
            cells.insert({p.pos.x, p.pos.y});
        }
        EXPECT_EQ(cells.size(), 1 + a.objects.size() + a.plates.size());
        EXPECT_EQ(observe(a).size(), TokenLayout::observation_length);
    }
}

TEST(Env, TinyGridRejected) {
    EnvConfig cfg;
    cfg.width = 2;
    cfg.height = 2;
    EXPECT_THROW(reset({0, 0, Split::IND}, 0, cfg), Error);
}

TEST(Env, RewardAlphabet) {
    const TaskSpec task{1, 4, Split::IND};
    EnvState s = reset(task, 5);
    // idle move away from everything: walk the gripper to a free cell first
    s.gripper = free_cell(s);
    s.holding.reset();
    const StepResult idle = step(s, Action::Grasp);
    EXPECT_EQ(idle.reward, 0.0f);
    EXPECT_FALSE(idle.done);

    // first grasp of the target
    s.gripper = s.objects[0].pos;
    const StepResult g1 = step(s, Action::Grasp);
    EXPECT_TRUE(g1.grasped_now);
    EXPECT_EQ(g1.reward, 0.1f);
    // releasing off-plate then grasping again pays nothing
    const StepResult r0 = step(s, Action::Release);
    EXPECT_EQ(r0.reward, 0.0f);
    const StepResult g2 = step(s, Action::Grasp);
    EXPECT_EQ(g2.reward, 0.0f);

    // release on the target plate
    s.gripper = s.plates[0].pos;
    s.objects[0].pos = s.gripper;
    const StepResult place = step(s, Action::Release);
    EXPECT_EQ(place.reward, 1.0f);
    EXPECT_TRUE(place.done);
    EXPECT_TRUE(place.placed_now);
    EXPECT_THROW(step(s, Action::Up), Error);
}

TEST(Env, WrongObjectOrPlateEarnsNothing) {
    const TaskSpec task{0, 0, Split::IND};
    EnvState s = reset(task, 9);
    ASSERT_GE(s.objects.size(), 2u);
    s.gripper = s.objects[1].pos;
    EXPECT_EQ(step(s, Action::Grasp).reward, 0.0f);
    s.gripper = s.plates[0].pos;
    s.objects[1].pos = s.gripper;
    const StepResult r = step(s, Action::Release);
    EXPECT_EQ(r.reward, 0.0f);
    EXPECT_FALSE(r.done);
}

TEST(Env, MovesClampAndTruncate) {
    EnvConfig cfg;
    cfg.max_steps = 5;
    EnvState s = reset({0, 1, Split::IND}, 2, cfg);
    s.gripper = {0, 0};
    StepResult r;
    for (int i = 0; i < 5; ++i) {
        r = step(s, Action::Left);
        EXPECT_GE(s.gripper.x, 0);
    }
    EXPECT_TRUE(r.done);
    EXPECT_TRUE(r.truncated);
    EXPECT_EQ(s.t, 5);
}

TEST(Expert, SolvesEveryTaskWithinPathBound) {
    const EnvConfig cfg;
    const int bound = 2 * (cfg.width + cfg.height) + 2;
    for (const auto & task : all_tasks()) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            EnvState s = reset(task, seed, cfg);
            int steps = 0;
            double ret = 0.0;
            while (!s.done) {
                const Action a = expert_policy(s);
                if (a == Action::Release) {
                    EXPECT_EQ(s.gripper, s.plates[0].pos);
                }
                ret += step(s, a).reward;
                ++steps;
            }
            EXPECT_TRUE(s.success) << task.id() << " seed " << seed;
            EXPECT_LE(steps, bound);
            EXPECT_NEAR(ret, 1.1, 1e-6);
        }
    }
}

TEST(Demos, DefaultCountAllSuccessful) {
    const TaskSuite s = make_task_suite(0);
    const auto demos = make_demos(s.ind, 50, 0);
    EXPECT_EQ(demos.size(), 800u);
    for (const auto & d : demos) {
        EXPECT_TRUE(d.success);
        EXPECT_EQ(d.task.split, Split::IND);
    }
}

TEST(Demos, OodRequestRejected) {
    const TaskSuite s = make_task_suite(0);
    EXPECT_THROW(make_demos(s.ood, 1, 0), Error);
}

TEST(Demos, ReplayReproducesObservations) {
    const TaskSuite s = make_task_suite(0);
    for (const auto & d : make_demos(s.ind, 2, 4)) {
        EnvState st = reset(d.task, d.seed);
        for (const auto & ds : d.steps) {
            ASSERT_EQ(observe(st), ds.obs);
            step(st, static_cast<Action>(ds.action));
        }
        EXPECT_TRUE(st.success);
    }
}

TEST(Demos, FileRoundTrip) {
    const TaskSuite s = make_task_suite(1);
    const std::string path = temp_path("demos.jsonl");
    const auto demos = generate_demos(s.ind, 3, 11, path);
    EXPECT_EQ(read_demos(path), demos);
    const std::string suite_path = temp_path("suite.json");
    write_suite(s, suite_path);
    const TaskSuite back = read_suite(suite_path);
    EXPECT_EQ(back.ind, s.ind);
    EXPECT_EQ(back.ood, s.ood);
    std::filesystem::remove(path);
    std::filesystem::remove(suite_path);
}

TEST(VecEnv, RejectsEmptyBatch) {
    EXPECT_THROW(VecEnv({{0, 0, Split::IND}}, 0, 1), Error);
}

TEST(VecEnv, SingleEnvMatchesScalarEnv) {
    const TaskSpec task{3, 1, Split::IND};
    VecEnv vec({task}, 1, 17);
    EnvState s = vec.state(0);
    for (int i = 0; i < 40; ++i) {
        if (s.done) {
            break;
        }
        const Action a = expert_policy(s);
        const StepResult scalar = step(s, a);
        const StepResult batched = vec.step(std::vector<Action>{a})[0];
        EXPECT_EQ(scalar.obs, batched.obs);
        EXPECT_EQ(scalar.reward, batched.reward);
        EXPECT_EQ(scalar.done, batched.done);
    }
}

TEST(VecEnv, ReproducibleAndIndependent) {
    const TaskSuite suite = make_task_suite(0);
    auto run = [&](std::size_t perturbed) {
        VecEnv vec(suite.ind, 16, 99);
        std::vector<std::vector<float>> rewards(16);
        for (int t = 0; t < 150; ++t) {
            std::vector<Action> actions;
            for (std::size_t i = 0; i < 16; ++i) {
                actions.push_back(i == perturbed ? Action::Up : expert_policy(vec.state(i)));
            }
            const auto res = vec.step(actions);
            for (std::size_t i = 0; i < 16; ++i) {
                rewards[i].push_back(res[i].reward);
            }
        }
        return rewards;
    };
    const auto base = run(99), again = run(99), perturbed = run(5);
    EXPECT_EQ(base, again);
    for (std::size_t i = 0; i < 16; ++i) {
        if (i != 5) {
            EXPECT_EQ(base[i], perturbed[i]) << "env " << i;
        }
    }
    EXPECT_NE(base[5], perturbed[5]);
}

TEST(Random, UniformBelowStaysInRange) {
    std::uint64_t rng = 1;
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(uniform_below(rng, 7), 7u);
    }
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}
