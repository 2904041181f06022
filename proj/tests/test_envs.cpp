#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "carp/envs.hpp"

using namespace carp;

TEST_CASE("reset determinism and arena bounds") {
    auto task = TaskSpec::reach();
    Rng a(5), b(5);
    auto s1 = reset(task, a), s2 = reset(task, b);
    CHECK(s1.x == s2.x);
    CHECK(s1.goal_y == s2.goal_y);

    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        auto s = reset(task, rng);
        CHECK(std::abs(s.x) <= 1.0f);
        CHECK(std::abs(s.y) <= 1.0f);
        CHECK(std::abs(s.goal_x) <= 1.0f);
        CHECK(std::abs(s.goal_y) <= 1.0f);
    }
}

TEST_CASE("fork reset geometry: start below, goal above the origin obstacle") {
    auto task = TaskSpec::fork();
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        auto s = reset(task, rng);
        CHECK(s.y < -task.obstacle_radius);
        CHECK(s.goal_y > task.obstacle_radius);
    }
}

TEST_CASE("step: zero action, clamping, collision blocking") {
    auto task = TaskSpec::reach();
    Rng rng(3);
    auto s = reset(task, rng);
    auto s2 = step(s, 0, 0, task);
    CHECK(s2.x == s.x);
    CHECK(s2.y == s.y);
    CHECK(s2.steps == s.steps + 1);

    // action clamped to max_step
    auto s3 = step(s, 5.0f, -5.0f, task);
    CHECK(std::abs(s3.x - s.x) <= task.max_step + 1e-6f);
    CHECK(std::abs(s3.y - s.y) <= task.max_step + 1e-6f);

    // fork: pushing toward the obstacle center from contact does not move
    auto fork = TaskSpec::fork();
    EnvState at_contact;
    at_contact.x = 0.0f;
    at_contact.y = -fork.obstacle_radius - 1e-4f;
    auto blocked = step(at_contact, 0.0f, fork.max_step, fork);
    CHECK(std::abs(blocked.y - at_contact.y) < 2e-3f);

    // and a long push from below stops at the boundary, not inside
    EnvState below;
    below.y = -0.35f;
    auto slid = step(below, 0.0f, fork.max_step, fork);
    CHECK(slid.x * slid.x + slid.y * slid.y >= fork.obstacle_radius * fork.obstacle_radius - 1e-4f);
}

TEST_CASE("expert reaches the goal within the cap on all tasks") {
    for (auto task : {TaskSpec::reach(), TaskSpec::fork(), TaskSpec::waypoints()}) {
        Rng master(7);
        int ok = 0;
        const int n = 100;
        for (int ep = 0; ep < n; ++ep) {
            Rng rng = master.split();
            auto s = reset(task, rng);
            for (int t = 0; t < task.episode_cap && !success(s, task); ++t) {
                auto [ax, ay] = expert_action(s, task, rng);
                s = step(s, ax, ay, task);
            }
            if (success(s, task)) ++ok;
        }
        CHECK_MESSAGE(ok >= 99, task.name << ": expert success " << ok << "/100");
    }
}

TEST_CASE("expert near goal emits near-zero action") {
    auto task = TaskSpec::reach();
    EnvState s;
    s.x = 0.3f;
    s.y = 0.3f;
    s.goal_x = 0.3f;
    s.goal_y = 0.3f;
    Rng rng(11);
    auto [ax, ay] = expert_action(s, task, rng);
    CHECK(std::abs(ax) <= 4 * task.expert_jitter);
    CHECK(std::abs(ay) <= 4 * task.expert_jitter);
}

TEST_CASE("fork expert mode split is near 50/50 over 200 demos") {
    auto demos = generate_demos(TaskSpec::fork(), 200, 13);
    int left = 0;
    for (const auto& d : demos)
        if (d.mode == "left") ++left;
    CHECK(left >= 80);
    CHECK(left <= 120);
}

TEST_CASE("fork trajectories classify into clean modes") {
    auto task = TaskSpec::fork();
    Rng master(17);
    for (int ep = 0; ep < 50; ++ep) {
        Rng rng = master.split();
        auto s = reset(task, rng);
        std::vector<std::pair<float, float>> traj{{s.x, s.y}};
        for (int t = 0; t < task.episode_cap && !success(s, task); ++t) {
            auto [ax, ay] = expert_action(s, task, rng);
            s = step(s, ax, ay, task);
            traj.push_back({s.x, s.y});
        }
        int mode = classify_fork_mode(traj, task);
        CHECK(mode == s.fork_mode);
        CHECK(mode != -1);
    }
}

TEST_CASE("staged success is cumulative and monotone") {
    auto task = TaskSpec::waypoints(3);
    EnvState s;
    s.progress = 2;
    auto p = staged_success(s, task);
    CHECK(p == std::vector<bool>{true, true, false});
    for (int prog = 0; prog <= 3; ++prog) {
        s.progress = prog;
        auto v = staged_success(s, task);
        for (size_t i = 1; i < v.size(); ++i) CHECK(v[i - 1] >= v[i]);
    }
    // never moving: all false
    EnvState idle;
    CHECK(staged_success(idle, task) == std::vector<bool>{false, false, false});
}

TEST_CASE("generate_demos: determinism, bounds, success") {
    auto d1 = generate_demos(TaskSpec::reach(), 20, 7);
    auto d2 = generate_demos(TaskSpec::reach(), 20, 7);
    REQUIRE(d1.size() == 20);
    for (size_t i = 0; i < d1.size(); ++i) {
        CHECK(d1[i].obs == d2[i].obs);
        CHECK(d1[i].act == d2[i].act);
        CHECK(d1[i].obs.size() == d1[i].act.size());
        for (const auto& a : d1[i].act) {
            CHECK(std::abs(a[0]) <= TaskSpec::reach().max_step + 1e-6f);
            CHECK(std::abs(a[1]) <= TaskSpec::reach().max_step + 1e-6f);
        }
    }
    CHECK_THROWS_AS(generate_demos(TaskSpec::reach(), 0, 7), std::invalid_argument);
}

TEST_CASE("observation layout") {
    auto reach_obs = observe(EnvState{}, TaskSpec::reach());
    CHECK(reach_obs.size() == 4);
    auto wp = TaskSpec::waypoints(3);
    Rng rng(19);
    auto s = reset(wp, rng);
    auto obs = observe(s, wp);
    CHECK(obs.size() == 7);
    CHECK(obs[4] == 1.0f);  // pursuing waypoint 0
    CHECK(obs[2] == s.waypoints[0].first);
}
