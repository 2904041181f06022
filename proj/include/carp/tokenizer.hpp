#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "carp/tensor.hpp"

namespace carp {

/// Discrete indices for one scale of one action dimension (l_k entries).
using TokenMap = std::vector<int>;
/// K token maps for one action dimension.
using ScaleTokens = std::vector<TokenMap>;
/// Per action dimension, K token maps each.
using MultiScaleTokens = std::vector<ScaleTokens>;

struct TokenizerConfig {
    int H = 16;  // action horizon
    int K = 4;   // number of scales
    int L = 4;   // feature map temporal length
    int C = 8;   // code dimension
    int V = 512; // codebook size
    std::vector<int> scale_lens;  // defaults to 1..K
    int enc_ch0 = 16, enc_ch1 = 32;
    float commit_weight = 1.0f;
    float quant_weight = 1.0f;

    static TokenizerConfig defaults(int k_scales = 4) {
        TokenizerConfig c;
        c.K = k_scales;
        c.L = std::max(4, k_scales);
        c.scale_lens.resize(k_scales);
        for (int i = 0; i < k_scales; ++i) c.scale_lens[i] = i + 1;
        return c;
    }

    int seq_len() const {
        int t = 0;
        for (int l : scale_lens) t += l;
        return t;
    }

    void validate() const {
        if (V < 2 || C < 1) throw ShapeError("tokenizer config: need V >= 2, C >= 1");
        if (static_cast<int>(scale_lens.size()) != K)
            throw ShapeError("tokenizer config: scale_lens size != K");
        if (scale_lens.front() < 1 || scale_lens.back() > L || L > H)
            throw ShapeError("tokenizer config: need 1 <= l_1, l_K <= L <= H");
        for (int i = 1; i < K; ++i)
            if (scale_lens[i] <= scale_lens[i - 1])
                throw ShapeError("tokenizer config: scale_lens must be strictly increasing");
    }
};

/// Cosine-similarity nearest-code lookup. Zero features fall back to token 0;
/// ties break toward the lowest index.
inline int quantize_nearest(const float* f, int C, const std::vector<float>& codebook, int V,
                            const std::vector<float>& inv_norms) {
    if (V < 1) throw ShapeError("quantize_nearest: empty codebook");
    float fn = 0.0f;
    for (int c = 0; c < C; ++c) fn += f[c] * f[c];
    if (fn == 0.0f) return 0;
    int best = 0;
    float best_sim = -2.0f;
    for (int v = 0; v < V; ++v) {
        const float* z = codebook.data() + static_cast<int64_t>(v) * C;
        float dot = 0.0f;
        for (int c = 0; c < C; ++c) dot += f[c] * z[c];
        float sim = dot * inv_norms[v];
        if (sim > best_sim) {
            best_sim = sim;
            best = v;
        }
    }
    return best;
}

namespace detail {

/// Straight-through splice: forward value is exactly `quant`, gradient passes
/// unchanged into `pre`. Keeps the accumulated F-hat bit-identical to a pure
/// lookup recomputation.
inline Tensor straight_through(const Tensor& pre, const Tensor& quant) {
    if (pre.shape() != quant.shape())
        throw ShapeError("straight_through: shape mismatch");
    auto pn = pre.node();
    return make_op("straight_through", quant.shape(), quant.value(), {pn}, [pn](TensorNode& n) {
        for (size_t i = 0; i < n.value.size(); ++i) pn->grad[i] += n.grad[i];
    });
}

}  // namespace detail

/// Multi-scale residual VQVAE for a single action dimension. The encoder maps
/// an (B,1,H) column to an (B,C,L) feature map; K residual quantization rounds
/// against a shared codebook produce one token map per scale.
class DimTokenizer {
public:
    DimTokenizer(TokenizerConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        auto conv_init = [&](int co, int ci, int k) {
            float stdev = 1.0f / std::sqrt(static_cast<float>(ci * k));
            return Tensor::randn({co, ci, k}, rng, stdev, true);
        };
        enc_w1_ = conv_init(cfg_.enc_ch0, 1, 3);
        enc_b1_ = Tensor::zeros({cfg_.enc_ch0}, true);
        enc_w2_ = conv_init(cfg_.enc_ch1, cfg_.enc_ch0, 3);
        enc_b2_ = Tensor::zeros({cfg_.enc_ch1}, true);
        enc_w3_ = conv_init(cfg_.C, cfg_.enc_ch1, 3);
        enc_b3_ = Tensor::zeros({cfg_.C}, true);
        dec_w1_ = conv_init(cfg_.enc_ch1, cfg_.C, 3);
        dec_b1_ = Tensor::zeros({cfg_.enc_ch1}, true);
        dec_w2_ = conv_init(cfg_.enc_ch0, cfg_.enc_ch1, 3);
        dec_b2_ = Tensor::zeros({cfg_.enc_ch0}, true);
        dec_w3_ = conv_init(cfg_.enc_ch0, cfg_.enc_ch0, 3);
        dec_b3_ = Tensor::zeros({cfg_.enc_ch0}, true);
        dec_w4_ = conv_init(1, cfg_.enc_ch0, 3);
        dec_b4_ = Tensor::zeros({1}, true);
        for (int k = 0; k < cfg_.K; ++k) {
            // identity-initialized: contributions start as the upsampled
            // quantized values themselves, so each residual round actually
            // cancels residual from the first optimizer step instead of
            // injecting a random mix the decoder then has to absorb
            std::vector<float> pw(static_cast<int64_t>(cfg_.C) * cfg_.C * 3, 0.0f);
            for (int c = 0; c < cfg_.C; ++c)
                pw[(static_cast<int64_t>(c) * cfg_.C + c) * 3 + 1] = 1.0f;
            phi_w_.push_back(Tensor::from({cfg_.C, cfg_.C, 3}, std::move(pw), true));
            phi_b_.push_back(Tensor::zeros({cfg_.C}, true));
        }
        // unit-norm rows: cosine lookup needs nonzero, well-spread directions
        std::vector<float> cb(static_cast<int64_t>(cfg_.V) * cfg_.C);
        for (int v = 0; v < cfg_.V; ++v) {
            float norm = 0.0f;
            for (int c = 0; c < cfg_.C; ++c) {
                float x = static_cast<float>(rng.normal()) / std::sqrt(static_cast<float>(cfg_.C));
                cb[static_cast<int64_t>(v) * cfg_.C + c] = x;
                norm += x * x;
            }
            norm = std::sqrt(norm);
            if (norm < 1e-8f) {
                cb[static_cast<int64_t>(v) * cfg_.C] = 1.0f;
                norm = 1.0f;
            }
            for (int c = 0; c < cfg_.C; ++c) cb[static_cast<int64_t>(v) * cfg_.C + c] /= norm;
        }
        codebook_ = Tensor::from({cfg_.V, cfg_.C}, std::move(cb), true);
        usage_counts_.assign(cfg_.V, 0);
    }

    const TokenizerConfig& config() const { return cfg_; }
    Tensor codebook() const { return codebook_; }
    const std::vector<int64_t>& usage_counts() const { return usage_counts_; }
    void reset_usage() { usage_counts_.assign(cfg_.V, 0); }

    /// (B,1,H) normalized action column -> (B,C,L) feature map.
    Tensor encode(const Tensor& a) const {
        if (a.shape().size() != 3 || a.shape()[1] != 1 || a.shape()[2] != cfg_.H)
            throw ShapeError("encode: expected (B,1," + std::to_string(cfg_.H) + "), got " +
                             shape_str(a.shape()));
        auto h = gelu(conv1d(a, enc_w1_, enc_b1_, 2, 1));
        h = gelu(conv1d(h, enc_w2_, enc_b2_, 2, 1));
        if (h.shape()[2] != cfg_.L) h = interp1d_linear(h, cfg_.L);
        return conv1d(h, enc_w3_, enc_b3_, 1, 1);
    }

    /// (B,C,L) accumulated feature map -> (B,1,H) action column.
    Tensor decode(const Tensor& fhat) const {
        auto h = gelu(conv1d(fhat, dec_w1_, dec_b1_, 1, 1));
        int mid = std::max(cfg_.L, cfg_.H / 2);
        if (h.shape()[2] != mid) h = interp1d_linear(h, mid);
        h = gelu(conv1d(h, dec_w2_, dec_b2_, 1, 1));
        if (h.shape()[2] != cfg_.H) h = interp1d_linear(h, cfg_.H);
        h = gelu(conv1d(h, dec_w3_, dec_b3_, 1, 1));  // full-resolution refinement
        return conv1d(h, dec_w4_, dec_b4_, 1, 1);
    }

    struct QuantizeResult {
        std::vector<ScaleTokens> tokens;  // per batch element, K token maps
        Tensor fhat;                      // (B,C,L), built from exact lookups
        std::vector<Tensor> pre;          // per scale: interp(residual, l_k), encoder-connected
        std::vector<Tensor> quant;        // per scale: codebook rows, codebook-connected
    };

    /// Residual multi-scale quantization rounds: tokens plus the accumulated
    /// approximation, with the per-scale pre/quant pairs the loss needs.
    QuantizeResult quantize_multiscale(const Tensor& feat, bool count_usage = false) {
        if (feat.shape().size() != 3 || feat.shape()[1] != cfg_.C || feat.shape()[2] != cfg_.L)
            throw ShapeError("quantize_multiscale: expected (B," + std::to_string(cfg_.C) + "," +
                             std::to_string(cfg_.L) + "), got " + shape_str(feat.shape()));
        int B = feat.shape()[0];
        QuantizeResult res;
        res.tokens.assign(B, ScaleTokens(cfg_.K));
        auto inv_norms = codebook_inv_norms();
        Tensor residual = feat;
        Tensor fhat = Tensor::zeros({B, cfg_.C, cfg_.L});
        for (int k = 0; k < cfg_.K; ++k) {
            int lk = cfg_.scale_lens[k];
            Tensor pre = interp1d_linear(residual, lk);  // (B,C,lk)
            std::vector<int> flat_ids(static_cast<size_t>(B) * lk);
            std::vector<float> fvec(cfg_.C);
            for (int b = 0; b < B; ++b) {
                for (int i = 0; i < lk; ++i) {
                    for (int c = 0; c < cfg_.C; ++c)
                        fvec[c] = pre.value()[(static_cast<int64_t>(b) * cfg_.C + c) * lk + i];
                    int tok = quantize_nearest(fvec.data(), cfg_.C, codebook_.value(), cfg_.V,
                                               inv_norms);
                    flat_ids[static_cast<size_t>(b) * lk + i] = tok;
                    res.tokens[b][k].push_back(tok);
                    if (count_usage) ++usage_counts_[tok];
                }
            }
            // (B*lk, C) -> (B, lk, C) -> (B, C, lk)
            Tensor quant = permute(reshape(embedding_lookup(codebook_, flat_ids), {B, lk, cfg_.C}),
                                   {0, 2, 1});
            res.pre.push_back(pre);
            res.quant.push_back(quant);
            Tensor z_st = detail::straight_through(pre, quant);
            Tensor contrib = conv1d(interp1d_linear(z_st, cfg_.L), phi_w_[k], phi_b_[k], 1, 1);
            residual = sub(residual, contrib);
            fhat = add(fhat, contrib);
        }
        res.fhat = fhat;
        return res;
    }

    /// Rebuild the accumulated feature map from token maps alone (optionally
    /// only the first `upto_k` scales). Identical op sequence to
    /// quantize_multiscale's accumulation path.
    Tensor fhat_from_tokens(const ScaleTokens& tokens, int upto_k = -1) const {
        if (static_cast<int>(tokens.size()) != cfg_.K)
            throw ShapeError("fhat_from_tokens: expected " + std::to_string(cfg_.K) + " scales");
        int kmax = upto_k < 0 ? cfg_.K : upto_k;
        Tensor fhat = Tensor::zeros({1, cfg_.C, cfg_.L});
        for (int k = 0; k < kmax; ++k) {
            int lk = cfg_.scale_lens[k];
            if (static_cast<int>(tokens[k].size()) != lk)
                throw ShapeError("fhat_from_tokens: scale " + std::to_string(k + 1) + " has " +
                                 std::to_string(tokens[k].size()) + " tokens, expected " +
                                 std::to_string(lk));
            Tensor quant =
                permute(reshape(embedding_lookup(codebook_, tokens[k]), {1, lk, cfg_.C}), {0, 2, 1});
            fhat = add(fhat, conv1d(interp1d_linear(quant, cfg_.L), phi_w_[k], phi_b_[k], 1, 1));
        }
        return fhat;
    }

    /// Token maps -> length-H action column (normalized units).
    Tensor decode_tokens(const ScaleTokens& tokens, int upto_k = -1) const {
        return decode(fhat_from_tokens(tokens, upto_k));
    }

    /// Eq.-5-style objective: reconstruction + per-scale quant/commit terms.
    Tensor vqvae_loss(const Tensor& actions, const Tensor& recon,
                      const QuantizeResult& qr) const {
        Tensor loss = mse(actions, recon);
        for (int k = 0; k < cfg_.K; ++k) {
            loss = add(loss, scale(mse(detach(qr.pre[k]), qr.quant[k]), cfg_.quant_weight));
            loss = add(loss, scale(mse(qr.pre[k], detach(qr.quant[k])), cfg_.commit_weight));
        }
        return loss;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        return {
            {"enc.w1", enc_w1_}, {"enc.b1", enc_b1_}, {"enc.w2", enc_w2_}, {"enc.b2", enc_b2_},
            {"enc.w3", enc_w3_}, {"enc.b3", enc_b3_}, {"dec.w1", dec_w1_}, {"dec.b1", dec_b1_},
            {"dec.w2", dec_w2_}, {"dec.b2", dec_b2_}, {"dec.w3", dec_w3_}, {"dec.b3", dec_b3_},
            {"dec.w4", dec_w4_}, {"dec.b4", dec_b4_}, {"codebook", codebook_},
        };
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> ps;
        for (auto& [name, t] : named_params()) ps.push_back(t);
        for (int k = 0; k < cfg_.K; ++k) {
            ps.push_back(phi_w_[k]);
            ps.push_back(phi_b_[k]);
        }
        return ps;
    }

    std::vector<std::pair<std::string, Tensor>> all_named_params() {
        auto ps = named_params();
        for (int k = 0; k < cfg_.K; ++k) {
            ps.push_back({"phi" + std::to_string(k) + ".w", phi_w_[k]});
            ps.push_back({"phi" + std::to_string(k) + ".b", phi_b_[k]});
        }
        return ps;
    }

    std::vector<float> codebook_inv_norms() const {
        std::vector<float> inv(cfg_.V);
        for (int v = 0; v < cfg_.V; ++v) {
            float n = 0.0f;
            for (int c = 0; c < cfg_.C; ++c) {
                float x = codebook_.value()[static_cast<int64_t>(v) * cfg_.C + c];
                n += x * x;
            }
            inv[v] = n > 0.0f ? 1.0f / std::sqrt(n) : 0.0f;
        }
        return inv;
    }

private:
    TokenizerConfig cfg_;
    Tensor enc_w1_, enc_b1_, enc_w2_, enc_b2_, enc_w3_, enc_b3_;
    Tensor dec_w1_, dec_b1_, dec_w2_, dec_b2_, dec_w3_, dec_b3_, dec_w4_, dec_b4_;
    std::vector<Tensor> phi_w_, phi_b_;
    Tensor codebook_;
    std::vector<int64_t> usage_counts_;
};

// ---------------------------------------------------------------------------
// rotation6d (6-DoF action spaces; unused by the planar synthetic tasks)
// ---------------------------------------------------------------------------

using Mat3 = std::array<double, 9>;  // row-major
using Rot6d = std::array<double, 6>;

/// First two columns of a rotation matrix.
inline Rot6d rot6d_from_matrix(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7]};
}

/// Gram-Schmidt the two columns, complete with a cross product.
inline Mat3 rot6d_to_matrix(const Rot6d& v) {
    std::array<double, 3> a{v[0], v[1], v[2]}, b{v[3], v[4], v[5]};
    double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    if (na < 1e-12) throw NumericError("rot6d_to_matrix: degenerate first column");
    for (auto& x : a) x /= na;
    double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for (int i = 0; i < 3; ++i) b[i] -= dot * a[i];
    double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    if (nb < 1e-12) throw NumericError("rot6d_to_matrix: columns are collinear");
    for (auto& x : b) x /= nb;
    std::array<double, 3> c{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                            a[0] * b[1] - a[1] * b[0]};
    return {a[0], b[0], c[0], a[1], b[1], c[1], a[2], b[2], c[2]};
}

}  // namespace carp
