// Scratch: where does tokenizer holdout error live? Per-position profile,
// feature-space quantization error, and a no-quantization capacity floor.
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main() {
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tc;
    tc.epochs = 150;
    auto cfg = TokenizerConfig::defaults(4);
    TrainReport rep;
    auto arts = train_tokenizer_stage(demos, cfg, tc, 7, &rep);
    std::printf("holdout recon %.6f\n", rep.metrics.at("holdout_recon_mse").get<double>());

    auto windows = make_windows(demos, 2, cfg.H);
    size_t n_hold = windows.size() / 10;
    size_t start = windows.size() - n_hold;
    int B = static_cast<int>(n_hold);
    for (int d = 0; d < 1; ++d) {
        auto& tok = arts.tokenizers[static_cast<size_t>(d)];
        std::vector<float> col;
        for (size_t i = start; i < windows.size(); ++i)
            for (int t = 0; t < cfg.H; ++t)
                col.push_back(arts.stats.normalize(
                    windows[i].actions[static_cast<size_t>(t)][static_cast<size_t>(d)], d));
        Tensor a = Tensor::from({B, 1, cfg.H}, col);
        Tensor feat = tok.encode(a);
        auto qr = tok.quantize_multiscale(feat);
        Tensor rec = tok.decode(qr.fhat);
        // per-position squared error and signal power
        std::vector<double> err(cfg.H, 0.0), pow(cfg.H, 0.0);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < cfg.H; ++t) {
                double rv = rec.value()[static_cast<size_t>(b * cfg.H + t)];
                double av = a.value()[static_cast<size_t>(b * cfg.H + t)];
                err[static_cast<size_t>(t)] += (rv - av) * (rv - av) / B;
                pow[static_cast<size_t>(t)] += av * av / B;
            }
        for (int t = 0; t < cfg.H; ++t)
            std::printf("pos %2d err %.5f signal_power %.5f\n", t, err[static_cast<size_t>(t)],
                        pow[static_cast<size_t>(t)]);
        double fq = mse(feat, qr.fhat).item();
        std::printf("feature-space quantization mse %.6f (feat power %.4f)\n", fq,
                    mse(feat, Tensor::zeros(feat.shape())).item());
    }
    return 0;
}
