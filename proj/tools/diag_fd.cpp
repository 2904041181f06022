// Scratch: per-block FD gradient diagnostics mirroring the acceptance
// criterion-1 structure.
#include <cstdio>

#include "carp/policy.hpp"
#include "carp/tokenizer.hpp"
#include "../tests/fd_oracle.hpp"

using namespace carp;

static TokenizerConfig tiny_tcfg(int K = 2) {
    auto c = TokenizerConfig::defaults(K);
    c.H = 8;
    c.V = 16;
    c.C = 4;
    c.enc_ch0 = 4;
    c.enc_ch1 = 6;
    return c;
}

static PolicyConfig tiny_pcfg(const TokenizerConfig& t) {
    auto p = PolicyConfig::for_tokenizer(t, 2, 4);
    p.width = 16;
    p.layers = 2;
    p.heads = 2;
    return p;
}

int main() {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        Tensor a = Tensor::randn({2, 6}, rng, 1.0f, true);
        Tensor w = Tensor::randn({6, 8}, rng, 0.5f, true);
        Tensor cw = Tensor::randn({3, 1, 3}, rng, 0.5f, true);
        Tensor tgt = Tensor::randn({2, 3, 5}, rng, 0.5f);
        auto forward = [&]() {
            Tensor h = layer_norm(gelu(matmul(a, w)));
            Tensor c = conv1d(reshape(h, {2, 1, 8}), cw, {}, 1, 1);
            Tensor ci = interp1d_linear(c, 5);
            Tensor l1 = mse(ci, tgt);
            Tensor l2 = cross_entropy_with_logits(reshape(ci, {6, 5}), {0, 1, 2, 3, 4, 0});
            return add(l1, scale(l2, 0.25f));
        };
        backward(forward());
        auto rep = carp_test::fd_check(
            {a, w, cw}, [&]() { return static_cast<double>(forward().item()); }, 2e-3);
        std::printf("composite seed %llu: %.3e\n", (unsigned long long)seed, rep.max_rel_err);
    }

    for (uint64_t seed = 0; seed < 3; ++seed) {
        auto cfg = tiny_tcfg();
        Rng rng(200 + seed);
        DimTokenizer tok(cfg, rng);
        Tensor a = Tensor::randn({2, 1, cfg.H}, rng, 0.5f);

        std::vector<Tensor> continuous, codebook_only;
        for (auto& [n, t] : tok.all_named_params())
            (n == "codebook" ? codebook_only : continuous).push_back(t);

        auto recon_loss = [&]() { return mse(a, tok.decode(tok.encode(a))); };
        backward(recon_loss());
        auto rep = carp_test::fd_check(
            continuous, [&]() { return static_cast<double>(recon_loss().item()); }, 2e-3);
        std::printf("tok recon seed %llu: %.3e\n", (unsigned long long)seed, rep.max_rel_err);

        for (auto& t : tok.params()) t.zero_grad();
        auto commit_loss = [&]() {
            auto qr = tok.quantize_multiscale(tok.encode(a));
            Tensor l = Tensor::zeros({});
            for (int k = 0; k < cfg.K; ++k) l = add(l, mse(qr.pre[k], detach(qr.quant[k])));
            return l;
        };
        backward(commit_loss());
        rep = carp_test::fd_check(
            continuous, [&]() { return static_cast<double>(commit_loss().item()); }, 1e-3);
        std::printf("tok commit seed %llu: %.3e\n", (unsigned long long)seed, rep.max_rel_err);

        for (auto& t : tok.params()) t.zero_grad();
        auto quant_loss = [&]() {
            auto qr = tok.quantize_multiscale(tok.encode(a));
            Tensor l = Tensor::zeros({});
            for (int k = 0; k < cfg.K; ++k) l = add(l, mse(detach(qr.pre[k]), qr.quant[k]));
            return l;
        };
        backward(quant_loss());
        rep = carp_test::fd_check(
            codebook_only, [&]() { return static_cast<double>(quant_loss().item()); }, 1e-3);
        std::printf("tok quant seed %llu: %.3e\n", (unsigned long long)seed, rep.max_rel_err);
    }

    for (uint64_t seed = 0; seed < 3; ++seed) {
        auto tcfg = tiny_tcfg();
        Rng rng(300 + seed);
        std::vector<DimTokenizer> toks;
        toks.emplace_back(tcfg, rng);
        toks.emplace_back(tcfg, rng);
        Policy pol(tiny_pcfg(tcfg), rng);
        MultiScaleTokens tokens(2, ScaleTokens(tcfg.K));
        for (int d = 0; d < 2; ++d)
            for (int k = 0; k < tcfg.K; ++k)
                for (int i = 0; i < tcfg.scale_lens[k]; ++i)
                    tokens[d][k].push_back(static_cast<int>(rng.uniform_int(tcfg.V)));
        std::vector<float> obs(8);
        for (auto& x : obs) x = static_cast<float>(rng.normal()) * 0.5f;
        Tensor obs_t = Tensor::from({1, 8}, obs);
        auto forward = [&]() {
            return scale(pol.next_scale_loss(pol.forward_train({tokens}, obs_t, toks), {tokens}),
                         0.25f);
        };
        backward(forward());
        auto rep = carp_test::fd_check(
            pol.params(), [&]() { return static_cast<double>(forward().item()); }, 2e-3);
        std::printf("policy seed %llu: %.3e\n", (unsigned long long)seed, rep.max_rel_err);
    }
    return 0;
}
