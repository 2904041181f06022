#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "carp/rng.hpp"

namespace carp {

enum class TaskVariant { Reach, Fork, Waypoints };

struct TaskSpec {
    TaskVariant variant = TaskVariant::Reach;
    std::string name = "reach";
    int n_waypoints = 0;
    int episode_cap = 100;
    float tol = 0.1f;            // success tolerance
    float max_step = 0.1f;       // per-step displacement bound (inf norm)
    float expert_jitter = 0.01f;
    float obstacle_radius = 0.3f;  // fork only, centered at origin
    float mode_margin = 0.1f;      // fork mode classifier band

    int obs_dim() const {
        // agent pos + target pos [+ waypoint one-hot]
        return variant == TaskVariant::Waypoints ? 4 + n_waypoints : 4;
    }

    static TaskSpec reach() { return TaskSpec{}; }

    static TaskSpec fork() {
        TaskSpec t;
        t.variant = TaskVariant::Fork;
        t.name = "fork";
        return t;
    }

    static TaskSpec waypoints(int n = 3) {
        TaskSpec t;
        t.variant = TaskVariant::Waypoints;
        t.name = "waypoints";
        t.n_waypoints = n;
        t.episode_cap = 200;
        return t;
    }

    static TaskSpec by_name(const std::string& name) {
        if (name == "reach") return reach();
        if (name == "fork") return fork();
        if (name == "waypoints") return waypoints();
        throw std::invalid_argument("unknown task '" + name + "' (reach|fork|waypoints)");
    }
};

struct EnvState {
    float x = 0, y = 0;
    float goal_x = 0, goal_y = 0;
    std::vector<std::pair<float, float>> waypoints;
    int progress = 0;  // waypoints reached, in order
    int steps = 0;
    int fork_mode = -1;  // expert bookkeeping: -1 undecided, 0 left, 1 right
};

inline float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

/// Target the agent should currently pursue (goal, or next waypoint).
inline std::pair<float, float> current_target(const EnvState& s, const TaskSpec& task) {
    if (task.variant == TaskVariant::Waypoints) {
        int i = std::min(s.progress, task.n_waypoints - 1);
        return s.waypoints[i];
    }
    return {s.goal_x, s.goal_y};
}

inline std::vector<float> observe(const EnvState& s, const TaskSpec& task) {
    auto [tx, ty] = current_target(s, task);
    std::vector<float> obs{s.x, s.y, tx, ty};
    if (task.variant == TaskVariant::Waypoints) {
        for (int i = 0; i < task.n_waypoints; ++i)
            obs.push_back(i == std::min(s.progress, task.n_waypoints - 1) ? 1.0f : 0.0f);
    }
    return obs;
}

inline EnvState reset(const TaskSpec& task, Rng& rng) {
    EnvState s;
    switch (task.variant) {
        case TaskVariant::Reach:
            s.x = static_cast<float>(rng.uniform(-0.9, 0.9));
            s.y = static_cast<float>(rng.uniform(-0.9, 0.9));
            do {
                s.goal_x = static_cast<float>(rng.uniform(-0.9, 0.9));
                s.goal_y = static_cast<float>(rng.uniform(-0.9, 0.9));
            } while (std::hypot(s.goal_x - s.x, s.goal_y - s.y) < 0.5f);
            break;
        case TaskVariant::Fork:
            // obstacle centered at origin; start below, goal above
            s.x = static_cast<float>(rng.uniform(-0.15, 0.15));
            s.y = static_cast<float>(rng.uniform(-0.75, -0.65));
            s.goal_x = static_cast<float>(rng.uniform(-0.15, 0.15));
            s.goal_y = static_cast<float>(rng.uniform(0.65, 0.75));
            break;
        case TaskVariant::Waypoints:
            s.x = static_cast<float>(rng.uniform(-0.9, 0.9));
            s.y = static_cast<float>(rng.uniform(-0.9, 0.9));
            float px = s.x, py = s.y;
            for (int i = 0; i < task.n_waypoints; ++i) {
                float wx, wy;
                do {
                    wx = static_cast<float>(rng.uniform(-0.9, 0.9));
                    wy = static_cast<float>(rng.uniform(-0.9, 0.9));
                } while (std::hypot(wx - px, wy - py) < 0.4f);
                s.waypoints.push_back({wx, wy});
                px = wx;
                py = wy;
            }
            break;
    }
    return s;
}

/// position += clamp(action); Fork blocks motion through the obstacle circle
/// (the agent slides to the contact point); Waypoints advances the progress
/// counter when within tolerance of the next waypoint.
inline EnvState step(const EnvState& state, float ax, float ay, const TaskSpec& task) {
    EnvState s = state;
    ax = clampf(ax, -task.max_step, task.max_step);
    ay = clampf(ay, -task.max_step, task.max_step);
    float nx = clampf(s.x + ax, -1.0f, 1.0f);
    float ny = clampf(s.y + ay, -1.0f, 1.0f);
    if (task.variant == TaskVariant::Fork) {
        // earliest intersection of the segment (x,y)->(nx,ny) with the circle
        float dx = nx - s.x, dy = ny - s.y;
        float r = task.obstacle_radius;
        float a = dx * dx + dy * dy;
        float b = 2.0f * (s.x * dx + s.y * dy);
        float c = s.x * s.x + s.y * s.y - r * r;
        if (a > 1e-12f) {
            float disc = b * b - 4 * a * c;
            if (disc >= 0.0f) {
                float sq = std::sqrt(disc);
                float t0 = (-b - sq) / (2 * a);
                if (t0 >= 0.0f && t0 <= 1.0f && c > 0.0f) {
                    // stop just short of the boundary
                    float t = std::max(0.0f, t0 - 1e-3f);
                    nx = s.x + t * dx;
                    ny = s.y + t * dy;
                } else if (c <= 0.0f) {
                    // already at/inside the boundary: only outward motion allowed
                    float n2x = nx, n2y = ny;
                    if (n2x * n2x + n2y * n2y < r * r) {
                        nx = s.x;
                        ny = s.y;
                    }
                }
            }
        }
    }
    s.x = nx;
    s.y = ny;
    if (task.variant == TaskVariant::Waypoints && s.progress < task.n_waypoints) {
        auto [wx, wy] = s.waypoints[s.progress];
        if (std::hypot(s.x - wx, s.y - wy) <= task.tol) ++s.progress;
    }
    ++s.steps;
    return s;
}

/// Scripted expert. Reach/Waypoints: proportional pursuit with a smooth speed
/// ramp near the target. Fork: pick left/right once per episode, then follow
/// a cubic Bezier arc around the obstacle.
inline std::pair<float, float> expert_action(EnvState& state, const TaskSpec& task, Rng& rng) {
    float tx, ty;
    if (task.variant == TaskVariant::Fork) {
        if (state.fork_mode < 0) state.fork_mode = rng.uniform() < 0.5 ? 0 : 1;
        float side = state.fork_mode == 0 ? -1.0f : 1.0f;
        // cubic Bezier: start-side control points clear the obstacle
        float p0x = state.x, p0y = -0.7f;
        float p1x = side * 0.8f, p1y = -0.35f;
        float p2x = side * 0.8f, p2y = 0.35f;
        float p3x = state.goal_x, p3y = state.goal_y;
        auto bez = [&](float t) {
            float u = 1 - t;
            return std::pair<float, float>{
                u * u * u * p0x + 3 * u * u * t * p1x + 3 * u * t * t * p2x + t * t * t * p3x,
                u * u * u * p0y + 3 * u * u * t * p1y + 3 * u * t * t * p2y + t * t * t * p3y};
        };
        // nearest curve parameter, then aim a bit ahead of it
        float best_t = 0, best_d = 1e9f;
        for (int i = 0; i <= 100; ++i) {
            float t = i / 100.0f;
            auto [bx, by] = bez(t);
            float d = std::hypot(bx - state.x, by - state.y);
            if (d < best_d) {
                best_d = d;
                best_t = t;
            }
        }
        auto [ax, ay] = bez(std::min(1.0f, best_t + 0.06f));
        tx = ax;
        ty = ay;
    } else {
        auto [gx, gy] = current_target(state, task);
        tx = gx;
        ty = gy;
    }
    float dx = tx - state.x, dy = ty - state.y;
    float dist = std::hypot(dx, dy);
    float speed = task.max_step * std::tanh(dist / 0.15f) / std::tanh(1.0f);
    float ax = 0, ay = 0;
    if (dist > 1e-6f) {
        ax = dx / dist * speed;
        ay = dy / dist * speed;
    }
    ax += static_cast<float>(rng.normal()) * task.expert_jitter;
    ay += static_cast<float>(rng.normal()) * task.expert_jitter;
    return {clampf(ax, -task.max_step, task.max_step), clampf(ay, -task.max_step, task.max_step)};
}

inline bool success(const EnvState& final_state, const TaskSpec& task) {
    if (task.variant == TaskVariant::Waypoints) return final_state.progress >= task.n_waypoints;
    return std::hypot(final_state.x - final_state.goal_x, final_state.y - final_state.goal_y) <=
           task.tol;
}

/// Cumulative staged metric for Waypoints: p_i true iff the first i waypoints
/// were reached in order.
inline std::vector<bool> staged_success(const EnvState& final_state, const TaskSpec& task) {
    std::vector<bool> p(task.n_waypoints);
    for (int i = 0; i < task.n_waypoints; ++i) p[i] = final_state.progress >= i + 1;
    return p;
}

/// Fork mode classifier over a trajectory: mean x inside the obstacle's
/// y-band. Returns 0 (left), 1 (right), or -1 (ambiguous).
inline int classify_fork_mode(const std::vector<std::pair<float, float>>& traj,
                              const TaskSpec& task) {
    double sum = 0;
    int n = 0;
    for (auto [x, y] : traj)
        if (std::abs(y) <= task.obstacle_radius) {
            sum += x;
            ++n;
        }
    if (n == 0) return -1;
    double mean = sum / n;
    if (mean < -task.mode_margin) return 0;
    if (mean > task.mode_margin) return 1;
    return -1;
}

struct Demo {
    std::string task;
    uint64_t seed = 0;
    std::string mode;  // fork: "left"/"right", else empty
    std::vector<std::vector<float>> obs;  // T x obs_dim
    std::vector<std::vector<float>> act;  // T x 2
};

/// n successful expert episodes (failures re-rolled). Aborts if the expert
/// fails more than half its attempts, which indicates a misconfigured task.
inline std::vector<Demo> generate_demos(const TaskSpec& task, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_demos: n must be >= 1");
    std::vector<Demo> demos;
    Rng master(seed);
    int attempts = 0;
    while (static_cast<int>(demos.size()) < n) {
        ++attempts;
        if (attempts > 2 * n && demos.size() < static_cast<size_t>(attempts) / 2)
            throw std::runtime_error("generate_demos: expert failure rate > 50%");
        Rng ep_rng = master.split();
        EnvState s = reset(task, ep_rng);
        Demo d;
        d.task = task.name;
        d.seed = seed;
        for (int t = 0; t < task.episode_cap; ++t) {
            d.obs.push_back(observe(s, task));
            auto [ax, ay] = expert_action(s, task, ep_rng);
            d.act.push_back({ax, ay});
            s = step(s, ax, ay, task);
            if (success(s, task)) break;
        }
        if (!success(s, task)) continue;
        if (task.variant == TaskVariant::Fork) d.mode = s.fork_mode == 0 ? "left" : "right";
        demos.push_back(std::move(d));
    }
    return demos;
}

}  // namespace carp
