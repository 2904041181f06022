#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "carp/policy.hpp"
#include "fd_oracle.hpp"

using namespace carp;

namespace {

// tiny shared fixture: K=2 scales, small widths, V=16
struct Tiny {
    TokenizerConfig tcfg;
    std::vector<DimTokenizer> tokenizers;
    PolicyConfig pcfg;
    Policy policy;

    static TokenizerConfig make_tcfg() {
        auto c = TokenizerConfig::defaults(2);
        c.H = 8;
        c.V = 16;
        c.C = 4;
        c.enc_ch0 = 4;
        c.enc_ch1 = 6;
        return c;
    }

    static PolicyConfig make_pcfg(const TokenizerConfig& t) {
        auto p = PolicyConfig::for_tokenizer(t, 2, 4);
        p.width = 16;
        p.layers = 2;
        p.heads = 2;
        return p;
    }

    explicit Tiny(uint64_t seed) : tcfg(make_tcfg()), pcfg(make_pcfg(tcfg)), policy([&] {
        Rng r(seed + 1000);
        return Policy(make_pcfg(make_tcfg()), r);
    }()) {
        Rng rng(seed);
        tokenizers.emplace_back(tcfg, rng);
        tokenizers.emplace_back(tcfg, rng);
    }

    MultiScaleTokens random_tokens(Rng& rng) const {
        MultiScaleTokens toks(2, ScaleTokens(tcfg.K));
        for (int d = 0; d < 2; ++d)
            for (int k = 0; k < tcfg.K; ++k)
                for (int i = 0; i < tcfg.scale_lens[k]; ++i)
                    toks[d][k].push_back(static_cast<int>(rng.uniform_int(tcfg.V)));
        return toks;
    }
};

}  // namespace

TEST_CASE("build_mask matches the block-causal definition") {
    auto m = build_mask({1, 2});
    REQUIRE(m.T == 3);
    CHECK(m.at(0, 0));
    CHECK_FALSE(m.at(0, 1));
    CHECK_FALSE(m.at(0, 2));
    for (int j = 0; j < 3; ++j) {
        CHECK(m.at(1, j));
        CHECK(m.at(2, j));
    }

    auto single = build_mask({1});
    CHECK(single.T == 1);
    CHECK(single.at(0, 0));

    auto m3 = build_mask({1, 2, 3});
    REQUIRE(m3.T == 6);
    for (int j = 0; j < 6; ++j) CHECK(m3.at(0, j) == (j == 0));
    for (int i = 1; i <= 2; ++i)
        for (int j = 0; j < 6; ++j) CHECK(m3.at(i, j) == (j <= 2));
    for (int j = 0; j < 6; ++j) CHECK(m3.at(5, j));

    // general invariant: allowed(i,j) <=> block(j) <= block(i)
    auto big = build_mask({1, 2, 3, 4});
    for (int i = 0; i < big.T; ++i)
        for (int j = 0; j < big.T; ++j)
            CHECK(big.at(i, j) == (big.block_of[j] <= big.block_of[i]));
}

TEST_CASE("scale input embeddings: e_1 from cond only, e_k from the prefix") {
    Tiny f(42);
    Rng rng(7);
    auto toks = f.random_tokens(rng);

    auto feats = [&](const MultiScaleTokens& t) {
        return scale_input_features(f.tokenizers, t, f.pcfg.scale_lens);
    };
    auto base = feats(toks);

    // changing any token leaves the scale-1 rows (all zeros) untouched
    auto toks2 = toks;
    toks2[0][0][0] = (toks2[0][0][0] + 1) % 16;
    toks2[1][1][1] = (toks2[1][1][1] + 1) % 16;
    auto changed = feats(toks2);
    int dc = f.pcfg.D * f.pcfg.C;
    for (int c = 0; c < dc; ++c) {
        CHECK(base[c] == 0.0f);
        CHECK(changed[c] == 0.0f);
    }

    // e_2 changes when r_1 changes...
    auto only_r1 = toks;
    only_r1[0][0][0] = (only_r1[0][0][0] + 3) % 16;
    auto f_r1 = feats(only_r1);
    bool any_diff = false;
    for (size_t i = dc; i < base.size(); ++i) any_diff |= (f_r1[i] != base[i]);
    CHECK(any_diff);

    // ...but not when r_2 changes (e_2 depends only on the coarser prefix)
    auto only_r2 = toks;
    only_r2[0][1][0] = (only_r2[0][1][0] + 3) % 16;
    auto f_r2 = feats(only_r2);
    for (size_t i = 0; i < base.size(); ++i) CHECK(f_r2[i] == base[i]);
}

TEST_CASE("forward_train shapes, determinism, near-uniform CE at init") {
    Tiny f(1);
    Rng rng(2);
    auto toks = f.random_tokens(rng);
    std::vector<MultiScaleTokens> batch{toks, toks};
    auto obs = Tensor::from({2, 8}, std::vector<float>(16, 0.1f));
    auto logits = f.policy.forward_train(batch, obs, f.tokenizers);
    CHECK(logits.shape() == Shape{2, 3, 2 * 16});
    // identical rows for identical samples
    for (int i = 0; i < logits.numel() / 2; ++i)
        CHECK(logits.value()[i] == logits.value()[logits.numel() / 2 + i]);

    // untrained loss is near ln V
    auto loss = f.policy.next_scale_loss(logits, batch);
    CHECK(loss.item() == doctest::Approx(std::log(16.0)).epsilon(0.25));
}

TEST_CASE("mask causality is bit-exact: later scales cannot leak backward") {
    Tiny f(3);
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto toks = f.random_tokens(rng);
        auto obs_v = std::vector<float>(8);
        for (auto& x : obs_v) x = static_cast<float>(rng.normal());
        auto obs = Tensor::from({1, 8}, obs_v);
        auto logits1 = f.policy.forward_train({toks}, obs, f.tokenizers);

        // perturb only the finest scale (block 1 of 2): scale-0 logits frozen
        auto toks2 = toks;
        toks2[0][1][static_cast<int>(rng.uniform_int(2))] = static_cast<int>(rng.uniform_int(16));
        toks2[1][1][static_cast<int>(rng.uniform_int(2))] = static_cast<int>(rng.uniform_int(16));
        auto logits2 = f.policy.forward_train({toks2}, obs, f.tokenizers);

        int row = 2 * 16;  // D*V logits per position; block 0 = position 0
        for (int c = 0; c < row; ++c) CHECK(logits1.value()[c] == logits2.value()[c]);
    }
}

TEST_CASE("next_scale_loss equals a naive double-loop oracle") {
    Tiny f(5);
    Rng rng(6);
    auto toks = f.random_tokens(rng);
    std::vector<MultiScaleTokens> batch{toks};
    auto obs = Tensor::from({1, 8}, std::vector<float>{1, 0, -1, 0.5f, 0, 0, 0.2f, -0.3f});
    auto logits = f.policy.forward_train(batch, obs, f.tokenizers);
    auto loss = f.policy.next_scale_loss(logits, batch);

    // naive: mean over (position, dim) of -log softmax[target]
    double total = 0.0;
    int count = 0;
    auto& m = f.policy.mask();
    for (int t = 0; t < m.T; ++t) {
        int k = m.block_of[t], i = m.pos_in_block[t];
        for (int d = 0; d < 2; ++d) {
            const float* row = logits.value().data() + (static_cast<size_t>(t) * 2 + d) * 16;
            double mx = row[0];
            for (int v = 1; v < 16; ++v) mx = std::max(mx, static_cast<double>(row[v]));
            double sum = 0;
            for (int v = 0; v < 16; ++v) sum += std::exp(row[v] - mx);
            total += -(row[toks[d][k][i]] - mx - std::log(sum));
            ++count;
        }
    }
    CHECK(loss.item() == doctest::Approx(total / count).epsilon(1e-5));

    // anchors: uniform logits -> ln V; one-hot-correct -> ~0
    auto uniform = Tensor::zeros({1, 3, 32});
    CHECK(f.policy.next_scale_loss(uniform, batch).item() ==
          doctest::Approx(std::log(16.0)).epsilon(1e-6));
    std::vector<float> hot(3 * 32, 0.0f);
    for (int t = 0; t < 3; ++t) {
        int k = m.block_of[t], i = m.pos_in_block[t];
        for (int d = 0; d < 2; ++d) hot[(t * 2 + d) * 16 + toks[d][k][i]] = 50.0f;
    }
    CHECK(f.policy.next_scale_loss(Tensor::from({1, 3, 32}, hot), batch).item() < 1e-6);

    // out-of-range token -> error
    auto bad = toks;
    bad[0][0][0] = 16;
    CHECK_THROWS_AS(f.policy.next_scale_loss(uniform, {bad}), ShapeError);
}

TEST_CASE("predict: exactly K passes, argmax==full-forward re-scoring, determinism") {
    Tiny f(8);
    std::vector<float> obs{0.5f, -0.2f, 0.1f, 0.0f, 0.4f, -0.1f, 0.2f, 0.1f};
    Rng srng(9);
    auto pred = f.policy.predict(obs, f.tokenizers, srng);
    CHECK(pred.transformer_passes == 2);  // K = 2

    // KV-cache/full-forward equivalence: teacher-force its own output and
    // check the argmax at every position reproduces the sampled tokens
    auto obs_t = Tensor::from({1, 8}, obs);
    auto logits = f.policy.forward_train({pred.tokens}, obs_t, f.tokenizers);
    auto& m = f.policy.mask();
    for (int t = 0; t < m.T; ++t) {
        int k = m.block_of[t], i = m.pos_in_block[t];
        for (int d = 0; d < 2; ++d) {
            const float* row = logits.value().data() + (static_cast<size_t>(t) * 2 + d) * 16;
            int best = 0;
            for (int v = 1; v < 16; ++v)
                if (row[v] > row[best]) best = v;
            CHECK(best == pred.tokens[d][k][i]);
        }
    }

    // determinism: same obs, argmax -> identical tokens
    Rng srng2(99);
    auto pred2 = f.policy.predict(obs, f.tokenizers, srng2);
    CHECK(pred2.tokens == pred.tokens);

    // two different observations generically differ at scale 1
    std::vector<float> obs_b{-0.7f, 0.6f, -0.3f, 0.8f, -0.6f, 0.5f, -0.2f, 0.7f};
    auto pred3 = f.policy.predict(obs_b, f.tokenizers, srng);
    CHECK(pred3.tokens != pred.tokens);
}

TEST_CASE("KV-cache incremental logits equal masked full forward within 1e-5") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Tiny f(20 + seed);
        Rng rng(30 + seed);
        std::vector<float> obs(8);
        for (auto& x : obs) x = static_cast<float>(rng.normal());
        Rng srng(1);
        auto pred = f.policy.predict(obs, f.tokenizers, srng);
        // teacher-force the sampled tokens through the masked full forward;
        // every logit must agree with the incremental pass
        auto full = f.policy.forward_train({pred.tokens}, Tensor::from({1, 8}, obs), f.tokenizers);
        REQUIRE(pred.logits.size() == static_cast<size_t>(full.numel()));
        for (size_t i = 0; i < pred.logits.size(); ++i)
            CHECK(std::abs(pred.logits[i] - full.value()[i]) < 1e-5f);
    }
}

TEST_CASE("top-k sampling: support restricted and frequencies match renormalized softmax") {
    // same weights twice (same init seed), different samplers
    auto tcfg = Tiny::make_tcfg();
    Rng trng(40);
    std::vector<DimTokenizer> toks;
    toks.emplace_back(tcfg, trng);
    toks.emplace_back(tcfg, trng);

    auto cfg = Tiny::make_pcfg(tcfg);
    Rng prng_a(41);
    Policy pol_argmax(cfg, prng_a);
    cfg.sampler.kind = SamplerConfig::Kind::TopK;
    cfg.sampler.k = 3;
    Rng prng_b(41);
    Policy pol_topk(cfg, prng_b);

    std::vector<float> obs{0.4f, -0.3f, 0.2f, 0.6f, 0.3f, -0.2f, 0.1f, 0.5f};

    // position 0 logits never depend on tokens, so one argmax pass pins them
    Rng s0(1);
    auto ref = pol_argmax.predict(obs, toks, s0);
    const float* row = ref.logits.data();  // dim 0, position 0, 16 logits
    std::vector<int> idx(16);
    for (int v = 0; v < 16; ++v) idx[v] = v;
    std::partial_sort(idx.begin(), idx.begin() + 3, idx.end(),
                      [&](int a, int b) { return row[a] > row[b]; });
    double z = 0.0;
    std::array<double, 3> p{};
    for (int i = 0; i < 3; ++i) z += std::exp(static_cast<double>(row[idx[i]] - row[idx[0]]));
    for (int i = 0; i < 3; ++i)
        p[i] = std::exp(static_cast<double>(row[idx[i]] - row[idx[0]])) / z;

    const int N = 2000;
    std::vector<int> counts(16, 0);
    Rng srng(123);
    for (int n = 0; n < N; ++n) {
        auto pred = pol_topk.predict(obs, toks, srng);
        ++counts[pred.tokens[0][0][0]];
    }
    // support restriction
    for (int v = 0; v < 16; ++v)
        if (v != idx[0] && v != idx[1] && v != idx[2]) CHECK(counts[v] == 0);
    // 3-sigma multinomial bounds
    for (int i = 0; i < 3; ++i) {
        double mean = N * p[i], sd = std::sqrt(N * p[i] * (1 - p[i]));
        CHECK(std::abs(counts[idx[i]] - mean) < 3 * sd + 1);
    }
}

TEST_CASE("top-k through the real policy: support restriction and k=1 degeneracy") {
    auto tcfg = Tiny::make_tcfg();
    Rng trng(50);
    std::vector<DimTokenizer> toks;
    toks.emplace_back(tcfg, trng);
    toks.emplace_back(tcfg, trng);

    auto cfg = Tiny::make_pcfg(tcfg);
    cfg.sampler.kind = SamplerConfig::Kind::TopK;
    cfg.sampler.k = 1;
    Rng prng(51);
    Policy pol_k1(cfg, prng);
    cfg.sampler.kind = SamplerConfig::Kind::Argmax;
    Rng prng2(51);
    Policy pol_am(cfg, prng2);

    std::vector<float> obs{0.1f, 0.2f, -0.1f, 0.3f, 0.1f, 0.2f, -0.1f, 0.3f};
    Rng s1(1), s2(2);
    CHECK(pol_k1.predict(obs, toks, s1).tokens == pol_am.predict(obs, toks, s2).tokens);

    // k > V errors
    cfg.sampler.kind = SamplerConfig::Kind::TopK;
    cfg.sampler.k = 17;
    Rng prng3(51);
    Policy pol_bad(cfg, prng3);
    Rng s3(3);
    CHECK_THROWS_AS(pol_bad.predict(obs, toks, s3), ShapeError);
}

TEST_CASE("adaptive conditioning is live: zeroing the observation changes logits") {
    Tiny f(60);
    Rng rng(61);
    auto toks = f.random_tokens(rng);
    std::vector<float> obs(8);
    for (auto& x : obs) x = static_cast<float>(rng.normal());
    auto l1 = f.policy.forward_train({toks}, Tensor::from({1, 8}, obs), f.tokenizers);
    auto l2 = f.policy.forward_train({toks}, Tensor::zeros({1, 8}), f.tokenizers);
    bool diff = false;
    for (int64_t i = 0; i < l1.numel(); ++i) diff |= (l1.value()[i] != l2.value()[i]);
    CHECK(diff);
}

TEST_CASE("policy loss gradients vs finite differences (tiny config)") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Tiny f(70 + seed);
        Rng rng(80 + seed);
        auto toks = f.random_tokens(rng);
        std::vector<float> obs(8);
        for (auto& x : obs) x = static_cast<float>(rng.normal()) * 0.5f;
        auto obs_t = Tensor::from({1, 8}, obs);

        // scaled toward ~1 so float32 forward noise stays below the FD step
        auto forward = [&]() {
            auto logits = f.policy.forward_train({toks}, obs_t, f.tokenizers);
            return scale(f.policy.next_scale_loss(logits, {toks}), 0.25f);
        };
        backward(forward());
        auto rep = carp_test::fd_check(
            f.policy.params(), [&]() { return static_cast<double>(forward().item()); }, 2e-3);
        CHECK_MESSAGE(rep.max_rel_err < 1e-3, "seed " << seed << " err " << rep.max_rel_err);
    }
}

TEST_CASE("config validation against tokenizer") {
    auto tcfg = Tiny::make_tcfg();
    auto pcfg = Tiny::make_pcfg(tcfg);
    CHECK_NOTHROW(pcfg.validate_against(tcfg));
    auto bad = pcfg;
    bad.V = 32;
    CHECK_THROWS_AS(bad.validate_against(tcfg), ShapeError);
    auto bad2 = pcfg;
    bad2.scale_lens = {1, 3};
    CHECK_THROWS_AS(bad2.validate_against(tcfg), ShapeError);
    auto bad3 = pcfg;
    bad3.width = 15;
    CHECK_THROWS_AS(bad3.validate(), ShapeError);
}
