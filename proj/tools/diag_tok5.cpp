// Scratch: tokenizer-only refinement geometry. After training with the
// acceptance recipe, quantize holdout windows and check whether partial
// decodes move monotonically toward the full decode, per transition.
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main(int argc, char** argv) {
    int tok_epochs = argc > 1 ? std::atoi(argv[1]) : 300;
    float phi_scale = argc > 2 ? std::atof(argv[2]) : 1.0f;
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tok_tc;
    tok_tc.epochs = tok_epochs;
    tok_tc.lr = 2e-3f;
    tok_tc.phi_lr_scale = phi_scale;
    TrainReport rep;
    auto arts = train_tokenizer_stage(demos, TokenizerConfig::defaults(4), tok_tc, 7, &rep);
    std::printf("phi_scale=%.3f recon=%.6f\n", phi_scale,
                rep.metrics.at("holdout_recon_mse").get<double>());
    const auto& cfg = arts.config;

    auto windows = make_windows(demos, 2, cfg.H);
    int N = static_cast<int>(windows.size());
    std::printf("windows=%d\n", N);

    // per-window, per-dim: distances d_k = mean |decode_k - decode_K|
    int take = std::min(N, 400);
    int stride = std::max(1, N / take);
    std::vector<std::vector<int>> viol(3, std::vector<int>(2, 0));  // transition x dim
    int mono_win = 0;
    double davg[4] = {0, 0, 0, 0}, favg[4] = {0, 0, 0, 0};
    for (int i = 0; i < take; ++i) {
        const auto& w = windows[static_cast<size_t>(i * stride)];
        bool ok = true;
        std::vector<double> dist(4, 0.0), fdist(4, 0.0);
        for (int d = 0; d < 2; ++d) {
            std::vector<float> col(static_cast<size_t>(cfg.H));
            for (int t = 0; t < cfg.H; ++t)
                col[static_cast<size_t>(t)] =
                    arts.stats.normalize(w.actions[static_cast<size_t>(t)][static_cast<size_t>(d)], d);
            Tensor a = Tensor::from({1, 1, cfg.H}, std::move(col));
            auto qr = arts.tokenizers[d].quantize_multiscale(arts.tokenizers[d].encode(a));
            std::vector<std::vector<float>> dec(4), fh(4);
            for (int k = 1; k <= 4; ++k) {
                dec[k - 1] = arts.tokenizers[d].decode_tokens(qr.tokens[0], k).value();
                fh[k - 1] = arts.tokenizers[d].fhat_from_tokens(qr.tokens[0], k).value();
            }
            for (int k = 0; k < 4; ++k) {
                double s = 0.0, sf = 0.0;
                for (int t = 0; t < cfg.H; ++t) s += std::abs(dec[k][t] - dec[3][t]);
                for (size_t j = 0; j < fh[k].size(); ++j) sf += std::abs(fh[k][j] - fh[3][j]);
                dist[k] += s / cfg.H;
                fdist[k] += sf / static_cast<double>(fh[k].size());
            }
        }
        for (int k = 0; k < 4; ++k) {
            davg[k] += dist[k];
            favg[k] += fdist[k];
        }
        for (int k = 1; k < 4; ++k) {
            if (dist[k] > dist[k - 1] + 1e-9) {
                ok = false;
                ++viol[k - 1][0];
            }
            if (fdist[k] > fdist[k - 1] + 1e-9) ++viol[k - 1][1];
        }
        if (ok) ++mono_win;
    }
    std::printf("tokenizer-only monotone (both dims summed): %d/%d\n", mono_win, take);
    std::printf("mean decode dists: %.5f %.5f %.5f %.5f\n", davg[0] / take, davg[1] / take,
                davg[2] / take, davg[3] / take);
    std::printf("mean feature dists: %.5f %.5f %.5f %.5f\n", favg[0] / take, favg[1] / take,
                favg[2] / take, favg[3] / take);
    std::printf("decode violations:  1->2: %d  2->3: %d  3->4: %d\n", viol[0][0], viol[1][0],
                viol[2][0]);
    std::printf("feature violations: 1->2: %d  2->3: %d  3->4: %d\n", viol[0][1], viol[1][1],
                viol[2][1]);
    return 0;
}
