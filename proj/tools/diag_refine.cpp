// Scratch: inspect per-scale refinement distances on Reach to see where
// monotonicity breaks.
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main(int argc, char** argv) {
    int tok_epochs = argc > 1 ? std::atoi(argv[1]) : 300;
    int pol_epochs = argc > 2 ? std::atoi(argv[2]) : 20;
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tok_tc;
    tok_tc.epochs = tok_epochs;
    tok_tc.lr = 2e-3f;
    tok_tc.phi_lr_scale = argc > 3 ? std::atof(argv[3]) : 1.0f;
    auto tok_arts = train_tokenizer_stage(demos, TokenizerConfig::defaults(4), tok_tc, 7);
    PolicyConfig pcfg = PolicyConfig::for_tokenizer(tok_arts.config, 2, task.obs_dim());
    TrainConfig pol_tc;
    pol_tc.epochs = pol_epochs;
    pol_tc.batch = 64;
    auto arts = train_policy_stage(demos, std::move(tok_arts), pcfg, pol_tc, 7);
    EvalOptions opt;
    opt.export_refinement = true;
    opt.use_ema = pol_epochs >= 40;
    auto ev = evaluate(arts, task, 30, 107, opt);
    std::printf("success %.3f\n", ev.success_rate);

    int mono = 0, total = 0;
    for (const auto& tr : ev.refinements) {
        if (tr.final_chunk.empty()) continue;
        ++total;
        std::vector<double> dist(4, 0.0);
        int count = 0;
        for (size_t cs = 0; cs < tr.final_chunk.size(); ++cs) {
            for (int k = 0; k < 4; ++k)
                for (size_t t = 0; t < tr.final_chunk[cs].size(); ++t) {
                    double dx = tr.per_scale[cs][static_cast<size_t>(k)][t][0] -
                                tr.final_chunk[cs][t][0];
                    double dy = tr.per_scale[cs][static_cast<size_t>(k)][t][1] -
                                tr.final_chunk[cs][t][1];
                    dist[static_cast<size_t>(k)] += std::sqrt(dx * dx + dy * dy);
                }
            count += static_cast<int>(tr.final_chunk[cs].size());
        }
        bool ok = true;
        for (int k = 1; k < 4; ++k)
            if (dist[static_cast<size_t>(k)] > dist[static_cast<size_t>(k - 1)] + 1e-9 * count)
                ok = false;
        if (ok) ++mono;
        if (total <= 12)
            std::printf("ep %2d dists/step: %.5f %.5f %.5f %.5f %s\n", total,
                        dist[0] / count, dist[1] / count, dist[2] / count, dist[3] / count,
                        ok ? "" : "<-- break");
    }
    std::printf("monotone %d/%d\n", mono, total);
    return 0;
}
