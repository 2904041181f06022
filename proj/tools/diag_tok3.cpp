// Scratch: capacity floor of the tokenizer encoder/decoder pair, trained as a
// plain autoencoder with quantization bypassed (quant := pre via phi stack).
#include <cstdio>

#include "carp/harness.hpp"

using namespace carp;

int main(int argc, char** argv) {
    int epochs = argc > 1 ? std::atoi(argv[1]) : 150;
    auto task = TaskSpec::reach();
    auto demos = generate_demos(task, 200, 7);
    auto cfg = TokenizerConfig::defaults(4);
    auto windows = make_windows(demos, 2, cfg.H);

    std::vector<std::vector<float>> rows;
    for (const auto& d : demos)
        for (const auto& r : d.act) rows.push_back(r);
    auto stats = NormStats::fit(rows, 2);

    Rng rng(7);
    DimTokenizer tok(cfg, rng);
    Adam opt(tok.params(), AdamConfig{1e-3f});

    int N = static_cast<int>(windows.size());
    std::vector<int> order(static_cast<size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    int n_hold = N / 10;
    std::vector<int> hold(order.end() - n_hold, order.end());
    std::vector<int> train(order.begin(), order.end() - n_hold);

    auto column = [&](const std::vector<int>& idx) {
        std::vector<float> col;
        for (int i : idx)
            for (int t = 0; t < cfg.H; ++t)
                col.push_back(stats.normalize(
                    windows[static_cast<size_t>(i)].actions[static_cast<size_t>(t)][0], 0));
        return Tensor::from({static_cast<int>(idx.size()), 1, cfg.H}, col);
    };

    auto named = tok.all_named_params();
    auto param = [&](const std::string& want) -> Tensor {
        for (auto& [n, t] : named)
            if (n == want) return t;
        throw std::logic_error("missing " + want);
    };
    // continuous path: residual rounds with lookup bypassed (quant := pre)
    auto forward = [&](const Tensor& a) {
        Tensor residual = tok.encode(a);
        Tensor fhat = Tensor::zeros(residual.shape());
        for (int k = 0; k < cfg.K; ++k) {
            Tensor pre = interp1d_linear(residual, cfg.scale_lens[static_cast<size_t>(k)]);
            Tensor contrib = conv1d(interp1d_linear(pre, cfg.L),
                                    param("phi" + std::to_string(k) + ".w"),
                                    param("phi" + std::to_string(k) + ".b"), 1, 1);
            residual = sub(residual, contrib);
            fhat = add(fhat, contrib);
        }
        return tok.decode(fhat);
    };

    Rng srng(99);
    for (int e = 0; e < epochs; ++e) {
        // simple shuffle
        for (size_t i = train.size(); i > 1; --i)
            std::swap(train[i - 1], train[srng.uniform_int(i)]);
        double el = 0;
        int nb = 0;
        for (size_t b0 = 0; b0 < train.size(); b0 += 256) {
            std::vector<int> idx(train.begin() + static_cast<long>(b0),
                                 train.begin() + static_cast<long>(std::min(b0 + 256, train.size())));
            Tensor a = column(idx);
            Tensor loss = mse(a, forward(a));
            opt.zero_grad();
            backward(loss);
            opt.step();
            el += loss.item();
            ++nb;
        }
        if ((e + 1) % 50 == 0) std::printf("epoch %d train mse %.6f\n", e + 1, el / nb);
    }
    Tensor ah = column(hold);
    std::printf("holdout AE mse (dim 0, no quantization): %.6f\n",
                static_cast<double>(mse(ah, forward(ah)).item()));
    return 0;
}
