// Scratch: per-scale quantizer statistics after the acceptance recipe —
// magnitude ratio |q|/|pre|, cosine alignment, and code utilization per scale.
#include <cmath>
#include <cstdio>
#include <set>

#include "carp/harness.hpp"

using namespace carp;

int main(int argc, char** argv) {
    int tok_epochs = argc > 1 ? std::atoi(argv[1]) : 300;
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tok_tc;
    tok_tc.epochs = tok_epochs;
    tok_tc.lr = 2e-3f;
    auto arts = train_tokenizer_stage(demos, TokenizerConfig::defaults(4), tok_tc, 7);
    const auto& cfg = arts.config;

    auto windows = make_windows(demos, 2, cfg.H);
    int take = 400, stride = std::max(1, static_cast<int>(windows.size()) / take);

    for (int d = 0; d < 2; ++d) {
        double pn[4] = {0}, qn[4] = {0}, cs[4] = {0};
        int cnt[4] = {0};
        std::set<int> used[4];
        for (int i = 0; i < take; ++i) {
            const auto& w = windows[static_cast<size_t>(i * stride)];
            std::vector<float> col(static_cast<size_t>(cfg.H));
            for (int t = 0; t < cfg.H; ++t)
                col[static_cast<size_t>(t)] = arts.stats.normalize(
                    w.actions[static_cast<size_t>(t)][static_cast<size_t>(d)], d);
            Tensor a = Tensor::from({1, 1, cfg.H}, std::move(col));
            auto qr = arts.tokenizers[d].quantize_multiscale(arts.tokenizers[d].encode(a));
            for (int k = 0; k < 4; ++k) {
                int lk = cfg.scale_lens[static_cast<size_t>(k)];
                const auto& pv = qr.pre[static_cast<size_t>(k)].value();
                const auto& qv = qr.quant[static_cast<size_t>(k)].value();
                for (int j = 0; j < lk; ++j) {
                    double p2 = 0, q2 = 0, dot = 0;
                    for (int c = 0; c < cfg.C; ++c) {
                        double pe = pv[static_cast<size_t>(c * lk + j)];
                        double qe = qv[static_cast<size_t>(c * lk + j)];
                        p2 += pe * pe;
                        q2 += qe * qe;
                        dot += pe * qe;
                    }
                    pn[k] += std::sqrt(p2);
                    qn[k] += std::sqrt(q2);
                    cs[k] += dot / (std::sqrt(p2 * q2) + 1e-12);
                    ++cnt[k];
                    used[k].insert(qr.tokens[0][static_cast<size_t>(k)][static_cast<size_t>(j)]);
                }
            }
        }
        std::printf("dim %d:\n", d);
        for (int k = 0; k < 4; ++k)
            std::printf("  scale %d: |pre|=%.4f |q|=%.4f ratio=%.2f cos=%.3f codes=%zu\n", k + 1,
                        pn[k] / cnt[k], qn[k] / cnt[k], (qn[k] / cnt[k]) / (pn[k] / cnt[k] + 1e-12),
                        cs[k] / cnt[k], used[k].size());
    }
    return 0;
}
