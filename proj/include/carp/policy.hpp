#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "carp/norm.hpp"
#include "carp/tensor.hpp"
#include "carp/tokenizer.hpp"

namespace carp {

struct SamplerConfig {
    enum class Kind { Argmax, TopK };
    Kind kind = Kind::Argmax;
    int k = 3;
    float temperature = 1.0f;
};

struct PolicyConfig {
    int width = 64;
    int layers = 3;
    int heads = 4;
    int K = 4;
    std::vector<int> scale_lens;  // must match the tokenizer
    int V = 512;
    int C = 8;  // tokenizer code dim, fixes the D*C -> W input projection
    int D = 2;  // action dimensions
    int O = 2;  // observation steps
    int obs_dim = 4;
    int num_tasks = 0;  // > 0 enables the learnable (num_tasks, 3) task table
    SamplerConfig sampler;

    static PolicyConfig for_tokenizer(const TokenizerConfig& t, int action_dims, int obs_dim_) {
        PolicyConfig p;
        p.K = t.K;
        p.scale_lens = t.scale_lens;
        p.V = t.V;
        p.C = t.C;
        p.D = action_dims;
        p.obs_dim = obs_dim_;
        return p;
    }

    int seq_len() const {
        int t = 0;
        for (int l : scale_lens) t += l;
        return t;
    }

    int cond_in() const { return O * obs_dim + (num_tasks > 0 ? 3 : 0); }

    void validate() const {
        if (width % heads != 0) throw ShapeError("policy config: width not divisible by heads");
        if (static_cast<int>(scale_lens.size()) != K)
            throw ShapeError("policy config: scale_lens size != K");
    }

    void validate_against(const TokenizerConfig& t) const {
        if (t.K != K || t.scale_lens != scale_lens)
            throw ShapeError("policy/tokenizer mismatch: K=" + std::to_string(K) +
                             " vs tokenizer K=" + std::to_string(t.K));
        if (t.V != V)
            throw ShapeError("policy/tokenizer mismatch: V=" + std::to_string(V) +
                             " vs tokenizer V=" + std::to_string(t.V));
        if (t.C != C) throw ShapeError("policy/tokenizer mismatch: code dim");
    }
};

/// Block-causal attention mask over T = sum(l_k) positions: attention is full
/// within a scale block and strictly coarse-to-fine across blocks.
struct BlockCausalMask {
    int T = 0;
    std::vector<int> block_of;      // position -> scale index (0-based)
    std::vector<int> pos_in_block;  // position -> index within its scale
    std::vector<uint8_t> allowed;   // T*T, row-major: allowed[i*T+j]

    bool at(int i, int j) const { return allowed[static_cast<size_t>(i) * T + j] != 0; }

    /// Additive form: 0 where allowed, large negative where not.
    Tensor additive() const {
        std::vector<float> m(static_cast<size_t>(T) * T);
        for (size_t i = 0; i < m.size(); ++i) m[i] = allowed[i] ? 0.0f : -1e9f;
        return Tensor::from({T, T}, std::move(m));
    }
};

inline BlockCausalMask build_mask(const std::vector<int>& scale_lens) {
    if (scale_lens.empty()) throw ShapeError("build_mask: empty scale_lens");
    BlockCausalMask m;
    for (size_t k = 0; k < scale_lens.size(); ++k)
        for (int i = 0; i < scale_lens[k]; ++i) {
            m.block_of.push_back(static_cast<int>(k));
            m.pos_in_block.push_back(i);
        }
    m.T = static_cast<int>(m.block_of.size());
    m.allowed.assign(static_cast<size_t>(m.T) * m.T, 0);
    for (int i = 0; i < m.T; ++i)
        for (int j = 0; j < m.T; ++j)
            m.allowed[static_cast<size_t>(i) * m.T + j] = m.block_of[j] <= m.block_of[i] ? 1 : 0;
    return m;
}

/// Raw scale-input features for one window: a (T, D*C) row block per scale.
/// Scale 1 rows are zero (the start token is built from the condition);
/// scale k>1 rows come from the frozen tokenizers' cumulative approximation
/// of the coarser prefix, interpolated to l_k.
inline std::vector<float> scale_input_features(const std::vector<DimTokenizer>& tokenizers,
                                               const MultiScaleTokens& tokens,
                                               const std::vector<int>& scale_lens) {
    int D = static_cast<int>(tokenizers.size());
    if (static_cast<int>(tokens.size()) != D)
        throw ShapeError("scale_input_features: token dims != tokenizer count");
    int C = tokenizers[0].config().C;
    int K = static_cast<int>(scale_lens.size());
    int T = 0;
    for (int l : scale_lens) T += l;
    std::vector<float> feats(static_cast<size_t>(T) * D * C, 0.0f);
    int row = scale_lens[0];  // scale-1 rows stay zero
    for (int k = 1; k < K; ++k) {
        int lk = scale_lens[k];
        for (int d = 0; d < D; ++d) {
            Tensor fhat = tokenizers[d].fhat_from_tokens(tokens[d], k);  // (1,C,L)
            Tensor at_lk = interp1d_linear(fhat, lk);                    // (1,C,lk)
            for (int i = 0; i < lk; ++i)
                for (int c = 0; c < C; ++c)
                    feats[(static_cast<size_t>(row) + i) * D * C + d * C + c] =
                        at_lk.value()[static_cast<size_t>(c) * lk + i];
        }
        row += lk;
    }
    return feats;
}

/// GPT-style decoder-only transformer doing next-scale prediction: one block
/// of positions per scale, conditioned on the observation window through the
/// start token and per-layer adaptive layer-norm modulation.
class Policy {
public:
    Policy(PolicyConfig cfg, Rng& rng) : cfg_(std::move(cfg)), mask_(build_mask(cfg_.scale_lens)) {
        cfg_.validate();
        int W = cfg_.width;
        auto lin_init = [&](int in, int out) {
            return Tensor::randn({in, out}, rng, 1.0f / std::sqrt(static_cast<float>(in)), true);
        };
        cond_w1_ = lin_init(cfg_.cond_in(), W);
        cond_b1_ = Tensor::zeros({W}, true);
        cond_w2_ = lin_init(W, W);
        cond_b2_ = Tensor::zeros({W}, true);
        start_w_ = lin_init(W, W);
        start_b_ = Tensor::zeros({W}, true);
        input_w_ = lin_init(cfg_.D * cfg_.C, W);
        input_b_ = Tensor::zeros({W}, true);
        scale_emb_ = Tensor::randn({cfg_.K, W}, rng, 0.02f, true);
        int max_lk = cfg_.scale_lens.back();
        pos_emb_ = Tensor::randn({max_lk, W}, rng, 0.02f, true);
        if (cfg_.num_tasks > 0) task_emb_ = Tensor::randn({cfg_.num_tasks, 3}, rng, 0.02f, true);
        for (int l = 0; l < cfg_.layers; ++l) {
            Layer lay;
            lay.qkv_w = lin_init(W, 3 * W);
            lay.qkv_b = Tensor::zeros({3 * W}, true);
            lay.out_w = lin_init(W, W);
            lay.out_b = Tensor::zeros({W}, true);
            lay.mlp_w1 = lin_init(W, 4 * W);
            lay.mlp_b1 = Tensor::zeros({4 * W}, true);
            lay.mlp_w2 = lin_init(4 * W, W);
            lay.mlp_b2 = Tensor::zeros({W}, true);
            // zero-init modulation: adaptive LN starts as a plain LN
            lay.ada1_w = Tensor::zeros({W, 2 * W}, true);
            lay.ada1_b = Tensor::zeros({2 * W}, true);
            lay.ada2_w = Tensor::zeros({W, 2 * W}, true);
            lay.ada2_b = Tensor::zeros({2 * W}, true);
            layers_.push_back(std::move(lay));
        }
        head_w_ = lin_init(W, cfg_.D * cfg_.V);
        head_b_ = Tensor::zeros({cfg_.D * cfg_.V}, true);
    }

    const PolicyConfig& config() const { return cfg_; }
    const BlockCausalMask& mask() const { return mask_; }
    void set_sampler(const SamplerConfig& s) { cfg_.sampler = s; }

    /// Condition vector from a flattened observation window (B, O*obs_dim).
    Tensor condition(const Tensor& obs_flat, const std::vector<int>& task_ids = {}) const {
        Tensor inp = obs_flat;
        if (cfg_.num_tasks > 0) {
            if (static_cast<int>(task_ids.size()) != obs_flat.shape()[0])
                throw ShapeError("condition: task ids required when task embedding is enabled");
            inp = concat({obs_flat, gather_rows(task_emb_, task_ids)}, 1);
        }
        auto h = gelu(add(matmul(inp, cond_w1_), cond_b1_));
        return add(matmul(h, cond_w2_), cond_b2_);
    }

    /// Teacher-forced training pass from precomputed raw inputs.
    /// obs_flat: (B, O*obs_dim); input_feats: (B, T, D*C) per
    /// scale_input_features. Returns logits (B, T, D*V).
    Tensor forward_from_features(const Tensor& obs_flat, const Tensor& input_feats,
                                 const std::vector<int>& task_ids = {}) const {
        int B = obs_flat.shape()[0];
        int T = mask_.T;
        if (input_feats.shape() != Shape{B, T, cfg_.D * cfg_.C})
            throw ShapeError("forward: input_feats shape " + shape_str(input_feats.shape()));
        Tensor cond = condition(obs_flat, task_ids);
        Tensor x = add(matmul(input_feats, input_w_), input_b_);  // (B,T,W)
        // start rows from the condition
        int l1 = cfg_.scale_lens[0];
        Tensor start = reshape(add(matmul(cond, start_w_), start_b_), {B, 1, cfg_.width});
        std::vector<Tensor> rows;
        for (int i = 0; i < l1; ++i) rows.push_back(start);
        if (T > l1) rows.push_back(Tensor::zeros({B, T - l1, cfg_.width}));
        x = add(x, concat(rows, 1));
        x = add(x, positional(0, T));
        Tensor maskT = mask_.additive();
        x = blocks(x, cond, &maskT, nullptr, 0);
        return add(matmul(layer_norm(x), head_w_), head_b_);
    }

    /// Teacher-forced pass straight from token maps (one sample per batch row).
    Tensor forward_train(const std::vector<MultiScaleTokens>& batch_tokens,
                         const Tensor& obs_flat, const std::vector<DimTokenizer>& tokenizers,
                         const std::vector<int>& task_ids = {}) const {
        int B = static_cast<int>(batch_tokens.size());
        int T = mask_.T;
        std::vector<float> feats;
        feats.reserve(static_cast<size_t>(B) * T * cfg_.D * cfg_.C);
        for (const auto& toks : batch_tokens) {
            auto f = scale_input_features(tokenizers, toks, cfg_.scale_lens);
            feats.insert(feats.end(), f.begin(), f.end());
        }
        return forward_from_features(obs_flat,
                                     Tensor::from({B, T, cfg_.D * cfg_.C}, std::move(feats)),
                                     task_ids);
    }

    /// Eq.-7-style objective: mean cross-entropy over scales, positions and
    /// action dimensions.
    Tensor next_scale_loss(const Tensor& logits, const std::vector<MultiScaleTokens>& batch_tokens) const {
        int B = static_cast<int>(batch_tokens.size());
        int T = mask_.T;
        if (logits.shape() != Shape{B, T, cfg_.D * cfg_.V})
            throw ShapeError("next_scale_loss: logits shape " + shape_str(logits.shape()));
        std::vector<int> targets(static_cast<size_t>(B) * T * cfg_.D);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                int k = mask_.block_of[t];
                int i = mask_.pos_in_block[t];
                for (int d = 0; d < cfg_.D; ++d) {
                    int tok = batch_tokens[b][d][k][i];
                    if (tok < 0 || tok >= cfg_.V)
                        throw ShapeError("next_scale_loss: token out of range");
                    targets[(static_cast<size_t>(b) * T + t) * cfg_.D + d] = tok;
                }
            }
        return cross_entropy_with_logits(reshape(logits, {B * T * cfg_.D, cfg_.V}), targets);
    }

    struct PredictResult {
        MultiScaleTokens tokens;       // [D][K][l_k]
        std::vector<float> logits;     // (T, D*V) row-major, concatenated per scale
        int transformer_passes = 0;
    };

    /// Coarse-to-fine autoregressive inference with a KV cache: exactly K
    /// transformer passes, no attention mask.
    PredictResult predict(const std::vector<float>& obs_window,
                          const std::vector<DimTokenizer>& tokenizers, Rng& rng,
                          std::optional<int> task_id = std::nullopt) const {
        if (cfg_.sampler.kind == SamplerConfig::Kind::TopK && cfg_.sampler.k > cfg_.V)
            throw ShapeError("sampler: top-k k exceeds codebook size");
        if (static_cast<int>(obs_window.size()) != cfg_.O * cfg_.obs_dim)
            throw ShapeError("predict: obs window size");
        Tensor obs_flat = Tensor::from({1, cfg_.O * cfg_.obs_dim}, obs_window);
        std::vector<int> task_ids;
        if (cfg_.num_tasks > 0)
            task_ids.push_back(task_id.value_or(0));
        Tensor cond = condition(obs_flat, task_ids);

        PredictResult res;
        res.tokens.assign(cfg_.D, ScaleTokens(cfg_.K));
        std::vector<KV> cache(layers_.size());
        int row0 = 0;
        for (int k = 0; k < cfg_.K; ++k) {
            int lk = cfg_.scale_lens[k];
            Tensor x;
            if (k == 0) {
                Tensor start = reshape(add(matmul(cond, start_w_), start_b_), {1, 1, cfg_.width});
                std::vector<Tensor> rows(lk, start);
                x = lk == 1 ? start : concat(rows, 1);
            } else {
                std::vector<float> feats(static_cast<size_t>(lk) * cfg_.D * cfg_.C, 0.0f);
                for (int d = 0; d < cfg_.D; ++d) {
                    Tensor fhat = tokenizers[d].fhat_from_tokens(res.tokens[d], k);
                    Tensor at_lk = interp1d_linear(fhat, lk);
                    for (int i = 0; i < lk; ++i)
                        for (int c = 0; c < cfg_.C; ++c)
                            feats[static_cast<size_t>(i) * cfg_.D * cfg_.C + d * cfg_.C + c] =
                                at_lk.value()[static_cast<size_t>(c) * lk + i];
                }
                x = add(matmul(Tensor::from({1, lk, cfg_.D * cfg_.C}, std::move(feats)), input_w_),
                        input_b_);
            }
            x = add(x, positional(row0, lk));
            x = blocks(x, cond, nullptr, &cache, row0);
            Tensor logits = add(matmul(layer_norm(x), head_w_), head_b_);  // (1,lk,D*V)
            res.logits.insert(res.logits.end(), logits.value().begin(), logits.value().end());
            ++res.transformer_passes;
            for (int i = 0; i < lk; ++i)
                for (int d = 0; d < cfg_.D; ++d) {
                    const float* row =
                        logits.value().data() + (static_cast<size_t>(i) * cfg_.D + d) * cfg_.V;
                    res.tokens[d][k].push_back(sample_token(row, rng));
                }
            row0 += lk;
        }
        return res;
    }

    struct ActionResult {
        std::vector<std::vector<float>> actions;  // H rows x D dims, env units
        // per-scale partial decodes (refinement trace), filled when requested
        std::vector<std::vector<std::vector<float>>> refinement;
        int transformer_passes = 0;
    };

    /// predict -> per-dimension token decode -> denormalize.
    ActionResult predict_actions(const std::vector<float>& obs_window,
                                 const std::vector<DimTokenizer>& tokenizers,
                                 const NormStats& stats, Rng& rng,
                                 std::optional<int> task_id = std::nullopt,
                                 bool export_refinement = false) const {
        auto pred = predict(obs_window, tokenizers, rng, task_id);
        int H = tokenizers[0].config().H;
        ActionResult res;
        res.transformer_passes = pred.transformer_passes;
        res.actions.assign(H, std::vector<float>(cfg_.D, 0.0f));
        for (int d = 0; d < cfg_.D; ++d) {
            Tensor col = tokenizers[d].decode_tokens(pred.tokens[d]);
            for (int t = 0; t < H; ++t)
                res.actions[t][d] = stats.denormalize(col.value()[t], d);
        }
        if (export_refinement) {
            res.refinement.resize(cfg_.K);
            for (int k = 1; k <= cfg_.K; ++k) {
                auto& snap = res.refinement[k - 1];
                snap.assign(H, std::vector<float>(cfg_.D, 0.0f));
                for (int d = 0; d < cfg_.D; ++d) {
                    Tensor col = tokenizers[d].decode_tokens(pred.tokens[d], k);
                    for (int t = 0; t < H; ++t)
                        snap[t][d] = stats.denormalize(col.value()[t], d);
                }
            }
        }
        return res;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> ps = {
            {"cond.w1", cond_w1_}, {"cond.b1", cond_b1_}, {"cond.w2", cond_w2_},
            {"cond.b2", cond_b2_}, {"start.w", start_w_}, {"start.b", start_b_},
            {"input.w", input_w_}, {"input.b", input_b_}, {"scale_emb", scale_emb_},
            {"pos_emb", pos_emb_}, {"head.w", head_w_},   {"head.b", head_b_},
        };
        if (task_emb_.defined()) ps.push_back({"task_emb", task_emb_});
        for (size_t l = 0; l < layers_.size(); ++l) {
            auto& lay = layers_[l];
            std::string p = "layer" + std::to_string(l) + ".";
            ps.insert(ps.end(), {{p + "qkv.w", lay.qkv_w},
                                 {p + "qkv.b", lay.qkv_b},
                                 {p + "out.w", lay.out_w},
                                 {p + "out.b", lay.out_b},
                                 {p + "mlp.w1", lay.mlp_w1},
                                 {p + "mlp.b1", lay.mlp_b1},
                                 {p + "mlp.w2", lay.mlp_w2},
                                 {p + "mlp.b2", lay.mlp_b2},
                                 {p + "ada1.w", lay.ada1_w},
                                 {p + "ada1.b", lay.ada1_b},
                                 {p + "ada2.w", lay.ada2_w},
                                 {p + "ada2.b", lay.ada2_b}});
        }
        return ps;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> ps;
        for (auto& [n, t] : named_params()) ps.push_back(t);
        return ps;
    }

private:
    struct Layer {
        Tensor qkv_w, qkv_b, out_w, out_b;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
        Tensor ada1_w, ada1_b, ada2_w, ada2_b;
    };

    struct KV {
        Tensor k, v;  // (B*heads, cached_len, head_dim)
    };

    /// Learned per-scale + within-scale position embeddings for positions
    /// [row0, row0+len), as a (len, W) tensor.
    Tensor positional(int row0, int len) const {
        std::vector<int> scale_ids(len), pos_ids(len);
        for (int i = 0; i < len; ++i) {
            scale_ids[i] = mask_.block_of[row0 + i];
            pos_ids[i] = mask_.pos_in_block[row0 + i];
        }
        return add(gather_rows(scale_emb_, scale_ids), gather_rows(pos_emb_, pos_ids));
    }

    Tensor modulated_norm(const Tensor& x, const Tensor& cond, const Tensor& ada_w,
                          const Tensor& ada_b) const {
        int B = x.shape()[0];
        int W = cfg_.width;
        Tensor mod = add(matmul(cond, ada_w), ada_b);  // (B, 2W)
        Tensor sc = reshape(slice(mod, 1, 0, W), {B, 1, W});
        Tensor sh = reshape(slice(mod, 1, W, W), {B, 1, W});
        return add(mul(layer_norm(x), add_scalar(sc, 1.0f)), sh);
    }

    /// Transformer stack. Training: mask != nullptr, cache == nullptr.
    /// Inference: mask == nullptr, cache accumulates keys/values per layer.
    Tensor blocks(Tensor x, const Tensor& cond, const Tensor* mask, std::vector<KV>* cache,
                  int row0) const {
        (void)row0;
        int B = x.shape()[0];
        int T = x.shape()[1];
        int W = cfg_.width;
        int h = cfg_.heads;
        int hd = W / h;
        float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
        for (size_t li = 0; li < layers_.size(); ++li) {
            const Layer& lay = layers_[li];
            Tensor normed = modulated_norm(x, cond, lay.ada1_w, lay.ada1_b);
            Tensor qkv = add(matmul(normed, lay.qkv_w), lay.qkv_b);  // (B,T,3W)
            auto split_heads = [&](const Tensor& t, int len) {
                // (B,len,W) -> (B*h, len, hd)
                return reshape(permute(reshape(t, {B, len, h, hd}), {0, 2, 1, 3}), {B * h, len, hd});
            };
            Tensor q = split_heads(slice(qkv, 2, 0, W), T);
            Tensor k = split_heads(slice(qkv, 2, W, W), T);
            Tensor v = split_heads(slice(qkv, 2, 2 * W, W), T);
            if (cache) {
                auto& kv = (*cache)[li];
                if (kv.k.defined()) {
                    kv.k = concat({kv.k, k}, 1);
                    kv.v = concat({kv.v, v}, 1);
                } else {
                    kv.k = k;
                    kv.v = v;
                }
                k = kv.k;
                v = kv.v;
            }
            Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), inv_sqrt);  // (B*h,T,Tk)
            if (mask) scores = add(scores, *mask);
            Tensor attn = bmm(softmax(scores), v);  // (B*h,T,hd)
            Tensor merged = reshape(permute(reshape(attn, {B, h, T, hd}), {0, 2, 1, 3}), {B, T, W});
            x = add(x, add(matmul(merged, lay.out_w), lay.out_b));
            Tensor normed2 = modulated_norm(x, cond, lay.ada2_w, lay.ada2_b);
            Tensor mid = gelu(add(matmul(normed2, lay.mlp_w1), lay.mlp_b1));
            x = add(x, add(matmul(mid, lay.mlp_w2), lay.mlp_b2));
        }
        return x;
    }

    int sample_token(const float* logits, Rng& rng) const {
        const auto& s = cfg_.sampler;
        if (s.kind == SamplerConfig::Kind::Argmax || s.k == 1) {
            int best = 0;
            for (int v = 1; v < cfg_.V; ++v)
                if (logits[v] > logits[best]) best = v;
            return best;
        }
        // top-k renormalized sampling with temperature
        std::vector<int> idx(cfg_.V);
        for (int v = 0; v < cfg_.V; ++v) idx[v] = v;
        std::partial_sort(idx.begin(), idx.begin() + s.k, idx.end(),
                          [&](int a, int b) { return logits[a] > logits[b]; });
        std::vector<double> probs(s.k);
        double mx = logits[idx[0]];
        double sum = 0.0;
        for (int i = 0; i < s.k; ++i) {
            probs[i] = std::exp((logits[idx[i]] - mx) / s.temperature);
            sum += probs[i];
        }
        double u = rng.uniform() * sum;
        double acc = 0.0;
        for (int i = 0; i < s.k; ++i) {
            acc += probs[i];
            if (u <= acc) return idx[i];
        }
        return idx[s.k - 1];
    }

    PolicyConfig cfg_;
    BlockCausalMask mask_;
    Tensor cond_w1_, cond_b1_, cond_w2_, cond_b2_;
    Tensor start_w_, start_b_, input_w_, input_b_;
    Tensor scale_emb_, pos_emb_, task_emb_;
    std::vector<Layer> layers_;
    Tensor head_w_, head_b_;
};

}  // namespace carp
