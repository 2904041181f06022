// Scratch: per-scale residual power after each quantization round on trained
// and untrained tokenizers.
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
    auto& tok = arts.tokenizers[0];
    std::vector<float> col;
    for (size_t i = start; i < windows.size(); ++i)
        for (int t = 0; t < cfg.H; ++t)
            col.push_back(arts.stats.normalize(
                windows[i].actions[static_cast<size_t>(t)][0], 0));
    Tensor a = Tensor::from({B, 1, cfg.H}, col);
    Tensor feat = tok.encode(a);
    std::printf("feat power %.6f\n", mse(feat, Tensor::zeros(feat.shape())).item());

    auto named = tok.all_named_params();
    auto param = [&](const std::string& want) -> Tensor {
        for (auto& [n, t] : named)
            if (n == want) return t;
        throw std::logic_error("missing " + want);
    };
    auto qr = tok.quantize_multiscale(feat);
    Tensor residual = feat;
    for (int k = 0; k < cfg.K; ++k) {
        Tensor contrib = conv1d(interp1d_linear(qr.quant[static_cast<size_t>(k)], cfg.L),
                                param("phi" + std::to_string(k) + ".w"),
                                param("phi" + std::to_string(k) + ".b"), 1, 1);
        residual = sub(residual, contrib);
        double pre_q = mse(qr.pre[static_cast<size_t>(k)],
                           qr.quant[static_cast<size_t>(k)]).item();
        std::printf("after scale %d: residual power %.6f (pre-vs-quant mse %.6f)\n", k + 1,
                    mse(residual, Tensor::zeros(residual.shape())).item(), pre_q);
    }
    return 0;
}
