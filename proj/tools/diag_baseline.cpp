// Scratch diagnostic: train the MSE chunk-regressor baseline on Fork and
// inspect its closed-loop behavior (success, steps, clearance, modes).
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main() {
    auto task = TaskSpec::fork();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tc;
    tc.epochs = 30;
    tc.batch = 64;
    {
        auto rtask = TaskSpec::reach();
        auto rdemos = generate_demos(rtask, 200, 7);
        TrainConfig rtc = tc;
        rtc.epochs = 60;  // matched to the Reach CARP policy budget
        auto rb = train_baseline(rdemos, 2, 16, rtc, 7);
        auto rm = evaluate_baseline(rb, rtask, 2, 50, 107);
        std::printf("reach baseline (60 ep): success %.3f mean_steps %.2f\n", rm.success_rate,
                    rm.mean_steps);
    }
    for (uint64_t ts : {7ull, 11ull, 23ull}) {
        auto b = train_baseline(demos, 2, 16, tc, ts);
        auto mm = evaluate_baseline(b, task, 2, 500, 107);
        std::printf("train_seed %llu: success %.3f mean_steps %.2f left %d right %d\n",
                    (unsigned long long)ts, mm.success_rate, mm.mean_steps, mm.fork_left,
                    mm.fork_right);
    }
    auto base = train_baseline(demos, 2, 16, tc, 7);
    std::printf("final baseline loss %.5f\n", base.epoch_losses.back());

    auto m = evaluate_baseline(base, task, 2, 50, 107);
    std::printf("success %.3f mean_steps %.2f left %d right %d\n", m.success_rate, m.mean_steps,
                m.fork_left, m.fork_right);
    for (size_t ep = 0; ep < m.trajectories.size(); ++ep) {
        const auto& tr = m.trajectories[ep];
        double min_r = 1e9;
        double max_absx = 0;
        for (auto [x, y] : tr) {
            min_r = std::min(min_r, (double)std::hypot(x, y));
            if (std::abs(y) <= task.obstacle_radius) max_absx = std::max(max_absx, (double)std::abs(x));
        }
        if (ep < 10)
            std::printf("ep %2zu steps %3zu min_r %.3f band_max|x| %.3f start(%.2f) end(%.2f,%.2f)\n",
                        ep, tr.size() - 1, min_r, max_absx, tr.front().first, tr.back().first,
                        tr.back().second);
    }
    // dump one trajectory fully
    const auto& tr = m.trajectories[0];
    for (size_t i = 0; i < tr.size(); i += 4)
        std::printf("  t=%zu (%.3f, %.3f)\n", i, tr[i].first, tr[i].second);
    return 0;
}
