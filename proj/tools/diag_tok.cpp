// Scratch: decompose tokenizer holdout error into continuous-path capacity
// vs quantization error, and measure codebook utilization.
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main(int argc, char** argv) {
    int epochs = argc > 1 ? std::atoi(argv[1]) : 300;
    float lr = argc > 2 ? static_cast<float>(std::atof(argv[2])) : 1e-3f;
    float commit = argc > 3 ? static_cast<float>(std::atof(argv[3])) : 1.0f;
    int ch0 = argc > 4 ? std::atoi(argv[4]) : 16;
    int ch1 = argc > 5 ? std::atoi(argv[5]) : 32;
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    TrainConfig tc;
    tc.epochs = epochs;
    tc.lr = lr;
    auto cfg = TokenizerConfig::defaults(4);
    cfg.commit_weight = commit;
    cfg.enc_ch0 = ch0;
    cfg.enc_ch1 = ch1;
    TrainReport rep;
    auto arts = train_tokenizer_stage(demos, cfg, tc, 7, &rep);
    std::printf("epochs %d lr %g commit %g ch %d/%d holdout recon %.6f\n", epochs, lr, commit,
                ch0, ch1, rep.metrics.at("holdout_recon_mse").get<double>());

    // decompose on the holdout windows
    auto windows = make_windows(demos, 2, arts.config.H);
    size_t n_hold = windows.size() / 10;
    size_t start = windows.size() - n_hold;
    const auto& acfg = arts.config;
    for (int d = 0; d < 2; ++d) {
        auto& tok = arts.tokenizers[static_cast<size_t>(d)];
        std::vector<float> col;
        int B = static_cast<int>(n_hold);
        for (size_t i = start; i < windows.size(); ++i)
            for (int t = 0; t < acfg.H; ++t)
                col.push_back(arts.stats.normalize(
                    windows[i].actions[static_cast<size_t>(t)][static_cast<size_t>(d)], d));
        Tensor a = Tensor::from({B, 1, acfg.H}, col);
        Tensor feat = tok.encode(a);
        // continuous: decode(feat) with quantization bypassed entirely
        double cont = mse(a, tok.decode(feat)).item();
        auto qr = tok.quantize_multiscale(feat, true);
        double quant = mse(a, tok.decode(qr.fhat)).item();
        // codebook usage on this sweep
        int used = 0;
        for (auto c : tok.usage_counts()) used += c > 0;
        std::printf("dim %d: continuous recon %.6f quantized recon %.6f codes used %d/%d\n", d,
                    cont, quant, used, acfg.V);
    }
    return 0;
}
