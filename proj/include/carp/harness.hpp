#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "carp/checkpoint.hpp"
#include "carp/envs.hpp"
#include "carp/norm.hpp"
#include "carp/policy.hpp"
#include "carp/tokenizer.hpp"

namespace carp {

/// One training pair: flattened observation window (O rows, left-edge
/// replicated) and H future actions (zero-padded past episode end).
struct Window {
    std::vector<float> obs;                  // O * obs_dim
    std::vector<std::vector<float>> actions; // H rows x D, env units
    int task_id = 0;
};

inline std::vector<Window> make_windows(const std::vector<Demo>& demos, int O, int H) {
    std::vector<Window> out;
    for (const auto& d : demos) {
        int T = static_cast<int>(d.obs.size());
        if (T == 0) {
            std::fprintf(stderr, "warning: skipping empty demo (seed %llu)\n",
                         static_cast<unsigned long long>(d.seed));
            continue;
        }
        int D = static_cast<int>(d.act[0].size());
        for (int t = 0; t < T; ++t) {
            Window w;
            for (int i = t - O + 1; i <= t; ++i) {
                const auto& row = d.obs[static_cast<size_t>(std::max(i, 0))];
                w.obs.insert(w.obs.end(), row.begin(), row.end());
            }
            for (int i = t; i < t + H; ++i)
                w.actions.push_back(i < T ? d.act[static_cast<size_t>(i)]
                                          : std::vector<float>(D, 0.0f));
            out.push_back(std::move(w));
        }
    }
    return out;
}

struct TrainConfig {
    int epochs = 300;
    int batch = 256;
    float lr = 1e-3f;
    bool cosine_lr = true;  // cosine decay from lr to lr/100 across epochs
    // lr multiplier for the scale-projection convs (tokenizer stage only).
    // Near identity they act as quasi-projections, so each residual round
    // shrinks the residual and partial decodes refine coarse-to-fine; full-rate
    // training drifts them into mutually-cancelling contributions that only
    // the final scale resolves (partial decodes then wander instead of
    // refining). 0.2 keeps refinement monotone without costing recon error.
    float phi_lr_scale = 0.2f;
    float ema_decay = 0.999f;
    bool ema = true;
    float holdout_frac = 0.1f;
};

namespace detail {
inline float scheduled_lr(const TrainConfig& tc, int epoch) {
    if (!tc.cosine_lr || tc.epochs <= 1) return tc.lr;
    float lo = tc.lr * 0.01f;
    float t = static_cast<float>(epoch) / static_cast<float>(tc.epochs - 1);
    return lo + 0.5f * (tc.lr - lo) * (1.0f + std::cos(3.14159265f * t));
}
}  // namespace detail

struct TrainReport {
    std::string stage;
    uint64_t seed = 0;
    double wall_seconds = 0.0;
    std::vector<float> epoch_losses;
    nlohmann::ordered_json metrics;
    nlohmann::ordered_json config;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["stage"] = stage;
        j["seed"] = seed;
        j["wall_seconds"] = wall_seconds;
        j["epoch_losses"] = epoch_losses;
        j["metrics"] = metrics;
        j["config"] = config;
        return j;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << to_json().dump(2) << "\n";
    }
};

/// Exponential moving average of a parameter set. Evaluation swaps the
/// shadow in; training keeps updating the live weights.
struct EmaShadow {
    float decay = 0.999f;
    std::vector<std::vector<float>> shadow;

    void init(std::vector<Tensor> params) {
        shadow.clear();
        for (auto& p : params) shadow.push_back(p.value());
    }

    void update(std::vector<Tensor> params) {
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& v = params[i].value();
            auto& s = shadow[i];
            for (size_t j = 0; j < v.size(); ++j)
                s[j] = decay * s[j] + (1.0f - decay) * v[j];
        }
    }

    /// Swaps shadow and live values; call again to restore.
    void swap_into(std::vector<Tensor> params) {
        for (size_t i = 0; i < params.size(); ++i) std::swap(params[i].mut_value(), shadow[i]);
    }
};

namespace detail {

inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i) + 1));
        std::swap(idx[i], idx[j]);
    }
}

/// (B,1,H) normalized action column for dimension d over selected windows.
inline Tensor action_column(const std::vector<Window>& ws, const std::vector<int>& idx,
                            const NormStats& stats, int d, int H) {
    std::vector<float> col;
    col.reserve(idx.size() * static_cast<size_t>(H));
    for (int i : idx)
        for (int t = 0; t < H; ++t)
            col.push_back(stats.normalize(ws[static_cast<size_t>(i)].actions[t][d], d));
    return Tensor::from({static_cast<int>(idx.size()), 1, H}, std::move(col));
}

}  // namespace detail

/// Mean squared reconstruction error over the given windows, normalized
/// action units, averaged across dimensions.
inline double reconstruction_mse(TokenizerArtifacts& arts, const std::vector<Window>& ws,
                                 const std::vector<int>& idx) {
    if (idx.empty()) return 0.0;
    int H = arts.config.H;
    int D = static_cast<int>(arts.tokenizers.size());
    double total = 0.0;
    for (int d = 0; d < D; ++d) {
        Tensor a = detail::action_column(ws, idx, arts.stats, d, H);
        auto& tok = arts.tokenizers[d];
        auto qr = tok.quantize_multiscale(tok.encode(a));
        Tensor recon = tok.decode(qr.fhat);
        total += mse(a, recon).item();
    }
    return total / D;
}

inline TokenizerArtifacts train_tokenizer_stage(const std::vector<Demo>& demos,
                                                TokenizerConfig cfg, const TrainConfig& tc,
                                                uint64_t seed, TrainReport* report = nullptr,
                                                int O = 2) {
    if (demos.empty()) throw std::invalid_argument("train_tokenizer_stage: no demos");
    auto t0 = std::chrono::steady_clock::now();
    auto windows = make_windows(demos, O, cfg.H);
    int D = static_cast<int>(demos[0].act[0].size());

    std::vector<std::vector<float>> action_rows;
    for (const auto& d : demos)
        for (const auto& r : d.act) action_rows.push_back(r);
    TokenizerArtifacts arts{cfg, NormStats::fit(action_rows, D), {}};
    Rng rng(seed);
    for (int d = 0; d < D; ++d) arts.tokenizers.emplace_back(cfg, rng);

    // fixed holdout from the tail of a seeded shuffle
    std::vector<int> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    detail::shuffle_indices(order, rng);
    int n_hold = std::max(1, static_cast<int>(order.size() * tc.holdout_frac));
    std::vector<int> hold(order.end() - n_hold, order.end());
    std::vector<int> train(order.begin(), order.end() - n_hold);

    // scale projections get their own optimizer so phi_lr_scale can damp them
    std::vector<Adam> opts, phi_opts;
    for (int d = 0; d < D; ++d) {
        std::vector<Tensor> main_ps, phi_ps;
        for (auto& [name, t] : arts.tokenizers[d].all_named_params())
            (name.rfind("phi", 0) == 0 ? phi_ps : main_ps).push_back(t);
        opts.emplace_back(main_ps, AdamConfig{tc.lr});
        phi_opts.emplace_back(phi_ps, AdamConfig{tc.lr * tc.phi_lr_scale});
    }

    std::vector<float> epoch_losses;
    for (int e = 0; e < tc.epochs; ++e) {
        float lr_e = detail::scheduled_lr(tc, e);
        for (auto& o : opts) o.set_lr(lr_e);
        for (auto& o : phi_opts) o.set_lr(lr_e * tc.phi_lr_scale);
        detail::shuffle_indices(train, rng);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t b0 = 0; b0 < train.size(); b0 += static_cast<size_t>(tc.batch)) {
            std::vector<int> idx(train.begin() + static_cast<long>(b0),
                                 train.begin() +
                                     static_cast<long>(std::min(b0 + tc.batch, train.size())));
            for (int d = 0; d < D; ++d) {
                auto& tok = arts.tokenizers[d];
                Tensor a = detail::action_column(windows, idx, arts.stats, d, cfg.H);
                auto qr = tok.quantize_multiscale(tok.encode(a), true);
                Tensor loss = tok.vqvae_loss(a, tok.decode(qr.fhat), qr);
                float lv = loss.item();
                if (!std::isfinite(lv))
                    throw std::runtime_error("tokenizer training diverged (non-finite loss) at epoch " +
                                             std::to_string(e + 1) + " dim " + std::to_string(d));
                opts[d].zero_grad();
                phi_opts[d].zero_grad();
                backward(loss);
                opts[d].step();
                phi_opts[d].step();
                epoch_loss += lv;
            }
            ++n_batches;
        }
        epoch_losses.push_back(static_cast<float>(epoch_loss / (n_batches * D)));
    }

    double held_mse = reconstruction_mse(arts, windows, hold);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (report) {
        report->stage = "tokenizer";
        report->seed = seed;
        report->wall_seconds = secs;
        report->epoch_losses = epoch_losses;
        report->metrics["holdout_recon_mse"] = held_mse;
        report->metrics["train_windows"] = static_cast<int>(train.size());
        report->metrics["holdout_windows"] = n_hold;
        report->config = to_json(cfg);
        report->config["epochs"] = tc.epochs;
        report->config["batch"] = tc.batch;
    }
    return arts;
}

inline PolicyArtifacts train_policy_stage(const std::vector<Demo>& demos,
                                          TokenizerArtifacts tok_arts, PolicyConfig cfg,
                                          const TrainConfig& tc, uint64_t seed,
                                          TrainReport* report = nullptr) {
    cfg.validate_against(tok_arts.config);
    auto t0 = std::chrono::steady_clock::now();
    const auto& tcfg = tok_arts.config;
    auto windows = make_windows(demos, cfg.O, tcfg.H);
    int D = cfg.D;
    int T = 0;
    for (int l : cfg.scale_lens) T += l;
    int N = static_cast<int>(windows.size());

    // tokenizers are frozen: tokenize every window and precompute the raw
    // transformer input features once
    std::vector<MultiScaleTokens> all_tokens(static_cast<size_t>(N), MultiScaleTokens(D));
    {
        std::vector<int> all(N);
        std::iota(all.begin(), all.end(), 0);
        const int chunk = 512;
        for (int d = 0; d < D; ++d) {
            auto& tok = tok_arts.tokenizers[d];
            for (int b0 = 0; b0 < N; b0 += chunk) {
                std::vector<int> idx(all.begin() + b0, all.begin() + std::min(b0 + chunk, N));
                Tensor a = detail::action_column(windows, idx, tok_arts.stats, d, tcfg.H);
                auto qr = tok.quantize_multiscale(tok.encode(a));
                for (size_t i = 0; i < idx.size(); ++i)
                    all_tokens[static_cast<size_t>(idx[i])][d] = qr.tokens[i];
            }
        }
    }
    std::vector<std::vector<float>> all_feats(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i)
        all_feats[static_cast<size_t>(i)] =
            scale_input_features(tok_arts.tokenizers, all_tokens[static_cast<size_t>(i)],
                                 cfg.scale_lens);

    Rng rng(seed);
    PolicyArtifacts arts;
    arts.tok = std::move(tok_arts);
    arts.config = cfg;
    arts.policy.emplace(cfg, rng);
    arts.ema_enabled = tc.ema;
    Adam opt(arts.policy->params(), AdamConfig{tc.lr});
    EmaShadow ema;
    ema.decay = tc.ema_decay;
    ema.init(arts.policy->params());

    std::vector<int> order(static_cast<size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::vector<float> epoch_losses;
    for (int e = 0; e < tc.epochs; ++e) {
        opt.set_lr(detail::scheduled_lr(tc, e));
        detail::shuffle_indices(order, rng);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tc.batch)) {
            size_t b1 = std::min(b0 + static_cast<size_t>(tc.batch), order.size());
            int B = static_cast<int>(b1 - b0);
            std::vector<float> obs, feats;
            std::vector<MultiScaleTokens> toks;
            std::vector<int> task_ids;
            for (size_t i = b0; i < b1; ++i) {
                const auto& w = windows[static_cast<size_t>(order[i])];
                obs.insert(obs.end(), w.obs.begin(), w.obs.end());
                const auto& f = all_feats[static_cast<size_t>(order[i])];
                feats.insert(feats.end(), f.begin(), f.end());
                toks.push_back(all_tokens[static_cast<size_t>(order[i])]);
                task_ids.push_back(w.task_id);
            }
            Tensor logits = arts.policy->forward_from_features(
                Tensor::from({B, cfg.O * cfg.obs_dim}, std::move(obs)),
                Tensor::from({B, T, D * cfg.C}, std::move(feats)),
                cfg.num_tasks > 0 ? task_ids : std::vector<int>{});
            Tensor loss = arts.policy->next_scale_loss(logits, toks);
            float lv = loss.item();
            if (!std::isfinite(lv))
                throw std::runtime_error("policy training diverged (non-finite loss) at epoch " +
                                         std::to_string(e + 1));
            opt.zero_grad();
            backward(loss);
            opt.step();
            ema.update(arts.policy->params());
            epoch_loss += lv;
            ++n_batches;
        }
        epoch_losses.push_back(static_cast<float>(epoch_loss / n_batches));
    }
    arts.ema = ema.shadow;

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (report) {
        report->stage = "policy";
        report->seed = seed;
        report->wall_seconds = secs;
        report->epoch_losses = epoch_losses;
        report->metrics["final_ce"] = epoch_losses.empty() ? 0.0f : epoch_losses.back();
        report->metrics["windows"] = N;
        report->metrics["ema"] = tc.ema;
        report->config = to_json(cfg);
        report->config["epochs"] = tc.epochs;
        report->config["batch"] = tc.batch;
    }
    return arts;
}

/// One trajectory snapshot per control step: final actions plus the partial
/// decode after each scale.
struct RefinementTrace {
    // [control_step][scale 1..K][t][dim]; final chunk is ActionResult.actions
    std::vector<std::vector<std::vector<std::vector<float>>>> per_scale;
    std::vector<std::vector<std::vector<float>>> final_chunk;  // [control_step][t][dim]
};

struct EvalMetrics {
    int episodes = 0;
    int successes = 0;
    double success_rate = 0.0;
    double mean_steps = 0.0;
    std::vector<double> staged;         // waypoints p-vector
    std::vector<std::vector<bool>> staged_per_episode;
    int fork_left = 0, fork_right = 0;  // successful episodes by mode
    int transformer_passes_per_predict = 0;
    std::vector<std::vector<std::pair<float, float>>> trajectories;
    std::vector<RefinementTrace> refinements;  // filled when requested
};

struct EvalOptions {
    int execute_steps = 8;  // of the H predicted
    bool export_refinement = false;
    bool shared_initial_state = false;  // all episodes reset from the same seed
    bool use_ema = true;
};

inline EvalMetrics evaluate(PolicyArtifacts& arts, const TaskSpec& task, int n_episodes,
                            uint64_t seed, const EvalOptions& opt = {}) {
    EvalMetrics m;
    m.episodes = n_episodes;
    if (task.variant == TaskVariant::Waypoints) m.staged.assign(task.n_waypoints, 0.0);

    bool swap_ema = opt.use_ema && arts.ema_enabled && !arts.ema.empty();
    EmaShadow shadow;
    if (swap_ema) {
        shadow.shadow = arts.ema;
        shadow.swap_into(arts.policy->params());
    }

    Rng master(seed);
    std::optional<int> task_id;
    if (arts.config.num_tasks > 0) task_id = 0;
    long total_steps = 0;
    for (int ep = 0; ep < n_episodes; ++ep) {
        // shared_initial_state pins the reset stream so every episode starts
        // identically; only the sampler stream varies
        Rng ep_rng = master.split();
        Rng reset_rng = opt.shared_initial_state ? Rng(seed) : ep_rng.split();
        EnvState s = reset(task, reset_rng);
        std::vector<std::pair<float, float>> traj{{s.x, s.y}};
        RefinementTrace trace;

        std::vector<std::vector<float>> obs_hist{observe(s, task)};
        bool done = false;
        while (!done && s.steps < task.episode_cap) {
            // O-step window, left-edge replicated
            std::vector<float> obs_win;
            for (int i = static_cast<int>(obs_hist.size()) - arts.config.O;
                 i < static_cast<int>(obs_hist.size()); ++i) {
                const auto& row = obs_hist[static_cast<size_t>(std::max(i, 0))];
                obs_win.insert(obs_win.end(), row.begin(), row.end());
            }
            auto act = arts.policy->predict_actions(obs_win, arts.tok.tokenizers, arts.tok.stats,
                                                    ep_rng, task_id, opt.export_refinement);
            m.transformer_passes_per_predict = act.transformer_passes;
            if (opt.export_refinement) {
                trace.per_scale.push_back(act.refinement);
                trace.final_chunk.push_back(act.actions);
            }
            for (int t = 0; t < opt.execute_steps && !done && s.steps < task.episode_cap; ++t) {
                s = step(s, act.actions[static_cast<size_t>(t)][0],
                         act.actions[static_cast<size_t>(t)][1], task);
                traj.emplace_back(s.x, s.y);
                obs_hist.push_back(observe(s, task));
                if (success(s, task)) done = true;
            }
        }
        total_steps += s.steps;
        bool ok = success(s, task);
        if (ok) ++m.successes;
        if (task.variant == TaskVariant::Waypoints) {
            auto p = staged_success(s, task);
            for (size_t i = 0; i < p.size(); ++i)
                if (p[i]) m.staged[i] += 1.0;
            m.staged_per_episode.push_back(p);
        }
        if (task.variant == TaskVariant::Fork && ok) {
            int mode = classify_fork_mode(traj, task);
            if (mode == 0) ++m.fork_left;
            if (mode == 1) ++m.fork_right;
        }
        m.trajectories.push_back(std::move(traj));
        if (opt.export_refinement) m.refinements.push_back(std::move(trace));
    }
    if (swap_ema) shadow.swap_into(arts.policy->params());

    m.success_rate = n_episodes > 0 ? static_cast<double>(m.successes) / n_episodes : 0.0;
    m.mean_steps = n_episodes > 0 ? static_cast<double>(total_steps) / n_episodes : 0.0;
    for (auto& p : m.staged) p /= std::max(1, n_episodes);
    return m;
}

struct LatencyReport {
    double mean_seconds = 0.0;  // per 400 actions
    double std_seconds = 0.0;
    int passes_per_predict = 0;
    int runs = 0;
};

/// Wall clock to produce n_actions executed actions (receding horizon,
/// 8 per predict), averaged over `runs` repetitions.
inline LatencyReport measure_latency(PolicyArtifacts& arts, const TaskSpec& task,
                                     int n_actions = 400, int runs = 5, uint64_t seed = 0) {
    LatencyReport rep;
    rep.runs = runs;
    const int exec = 8;
    std::vector<double> times;
    for (int r = 0; r < runs; ++r) {
        Rng rng(seed + static_cast<uint64_t>(r));
        EnvState s = reset(task, rng);
        std::vector<std::vector<float>> obs_hist{observe(s, task)};
        auto t0 = std::chrono::steady_clock::now();
        int produced = 0;
        while (produced < n_actions) {
            std::vector<float> obs_win;
            for (int i = static_cast<int>(obs_hist.size()) - arts.config.O;
                 i < static_cast<int>(obs_hist.size()); ++i) {
                const auto& row = obs_hist[static_cast<size_t>(std::max(i, 0))];
                obs_win.insert(obs_win.end(), row.begin(), row.end());
            }
            auto act = arts.policy->predict_actions(obs_win, arts.tok.tokenizers, arts.tok.stats,
                                                    rng);
            rep.passes_per_predict = act.transformer_passes;
            for (int t = 0; t < exec && produced < n_actions; ++t, ++produced) {
                s = step(s, act.actions[static_cast<size_t>(t)][0],
                         act.actions[static_cast<size_t>(t)][1], task);
                obs_hist.push_back(observe(s, task));
            }
        }
        times.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    double sum = 0.0;
    for (double t : times) sum += t;
    rep.mean_seconds = sum / runs;
    double var = 0.0;
    for (double t : times) var += (t - rep.mean_seconds) * (t - rep.mean_seconds);
    rep.std_seconds = runs > 1 ? std::sqrt(var / (runs - 1)) : 0.0;
    return rep;
}

/// MSE-trained chunk regressor: two-layer MLP from the observation window to
/// all H*D actions at once. Same windows and normalization as the policy.
class BaselineChunkRegressor {
public:
    BaselineChunkRegressor(int obs_in, int H, int D, int hidden, Rng& rng)
        : H_(H), D_(D) {
        auto lin = [&](int in, int out) {
            return Tensor::randn({in, out}, rng, 1.0f / std::sqrt(static_cast<float>(in)), true);
        };
        w1_ = lin(obs_in, hidden);
        b1_ = Tensor::zeros({hidden}, true);
        w2_ = lin(hidden, hidden);
        b2_ = Tensor::zeros({hidden}, true);
        w3_ = lin(hidden, H * D);
        b3_ = Tensor::zeros({H * D}, true);
    }

    Tensor forward(const Tensor& obs_flat) const {
        auto h = gelu(add(matmul(obs_flat, w1_), b1_));
        h = gelu(add(matmul(h, w2_), b2_));
        return add(matmul(h, w3_), b3_);  // (B, H*D), normalized units
    }

    std::vector<std::vector<float>> predict_chunk(const std::vector<float>& obs_win,
                                                  const NormStats& stats) const {
        Tensor out = forward(Tensor::from({1, static_cast<int>(obs_win.size())}, obs_win));
        std::vector<std::vector<float>> actions(static_cast<size_t>(H_),
                                                std::vector<float>(static_cast<size_t>(D_)));
        for (int t = 0; t < H_; ++t)
            for (int d = 0; d < D_; ++d)
                actions[static_cast<size_t>(t)][static_cast<size_t>(d)] =
                    stats.denormalize(out.value()[static_cast<size_t>(t * D_ + d)], d);
        return actions;
    }

    std::vector<Tensor> params() { return {w1_, b1_, w2_, b2_, w3_, b3_}; }

    int horizon() const { return H_; }

private:
    int H_, D_;
    Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

struct BaselineResult {
    NormStats stats;
    std::optional<BaselineChunkRegressor> model;
    std::vector<float> epoch_losses;
};

inline BaselineResult train_baseline(const std::vector<Demo>& demos, int O, int H,
                                     const TrainConfig& tc, uint64_t seed, int hidden = 128) {
    auto windows = make_windows(demos, O, H);
    int D = static_cast<int>(demos[0].act[0].size());
    int obs_in = static_cast<int>(windows[0].obs.size());
    std::vector<std::vector<float>> rows;
    for (const auto& d : demos)
        for (const auto& r : d.act) rows.push_back(r);
    BaselineResult res;
    res.stats = NormStats::fit(rows, D);

    Rng rng(seed);
    res.model.emplace(obs_in, H, D, hidden, rng);
    Adam opt(res.model->params(), AdamConfig{tc.lr});
    int N = static_cast<int>(windows.size());
    std::vector<int> order(static_cast<size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < tc.epochs; ++e) {
        opt.set_lr(detail::scheduled_lr(tc, e));
        detail::shuffle_indices(order, rng);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tc.batch)) {
            size_t b1 = std::min(b0 + static_cast<size_t>(tc.batch), order.size());
            int B = static_cast<int>(b1 - b0);
            std::vector<float> obs, tgt;
            for (size_t i = b0; i < b1; ++i) {
                const auto& w = windows[static_cast<size_t>(order[i])];
                obs.insert(obs.end(), w.obs.begin(), w.obs.end());
                for (int t = 0; t < H; ++t)
                    for (int d = 0; d < D; ++d)
                        tgt.push_back(res.stats.normalize(w.actions[static_cast<size_t>(t)][d], d));
            }
            Tensor pred = res.model->forward(Tensor::from({B, obs_in}, std::move(obs)));
            Tensor loss = mse(Tensor::from({B, H * D}, std::move(tgt)), pred);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += loss.item();
            ++n_batches;
        }
        res.epoch_losses.push_back(static_cast<float>(epoch_loss / n_batches));
    }
    return res;
}

inline EvalMetrics evaluate_baseline(BaselineResult& base, const TaskSpec& task, int O,
                                     int n_episodes, uint64_t seed, int execute_steps = 8) {
    EvalMetrics m;
    m.episodes = n_episodes;
    if (task.variant == TaskVariant::Waypoints) m.staged.assign(task.n_waypoints, 0.0);
    Rng master(seed);
    long total_steps = 0;
    for (int ep = 0; ep < n_episodes; ++ep) {
        Rng ep_rng = master.split();
        EnvState s = reset(task, ep_rng);
        std::vector<std::pair<float, float>> traj{{s.x, s.y}};
        std::vector<std::vector<float>> obs_hist{observe(s, task)};
        bool done = false;
        while (!done && s.steps < task.episode_cap) {
            std::vector<float> obs_win;
            for (int i = static_cast<int>(obs_hist.size()) - O;
                 i < static_cast<int>(obs_hist.size()); ++i) {
                const auto& row = obs_hist[static_cast<size_t>(std::max(i, 0))];
                obs_win.insert(obs_win.end(), row.begin(), row.end());
            }
            auto actions = base.model->predict_chunk(obs_win, base.stats);
            for (int t = 0; t < execute_steps && !done && s.steps < task.episode_cap; ++t) {
                s = step(s, actions[static_cast<size_t>(t)][0], actions[static_cast<size_t>(t)][1],
                         task);
                traj.emplace_back(s.x, s.y);
                obs_hist.push_back(observe(s, task));
                if (success(s, task)) done = true;
            }
        }
        total_steps += s.steps;
        bool ok = success(s, task);
        if (ok) ++m.successes;
        if (task.variant == TaskVariant::Waypoints) {
            auto p = staged_success(s, task);
            for (size_t i = 0; i < p.size(); ++i)
                if (p[i]) m.staged[i] += 1.0;
        }
        if (task.variant == TaskVariant::Fork && ok) {
            int mode = classify_fork_mode(traj, task);
            if (mode == 0) ++m.fork_left;
            if (mode == 1) ++m.fork_right;
        }
        m.trajectories.push_back(std::move(traj));
    }
    m.success_rate = n_episodes > 0 ? static_cast<double>(m.successes) / n_episodes : 0.0;
    m.mean_steps = n_episodes > 0 ? static_cast<double>(total_steps) / n_episodes : 0.0;
    for (auto& p : m.staged) p /= std::max(1, n_episodes);
    return m;
}

struct AblationRow {
    int K = 0;
    double recon_mse = 0.0;
    double success = 0.0;
};

/// Full two-stage train + eval per K with L = max(K, 4). Budgets are scaled
/// down relative to the main runs so the sweep stays within its time box.
inline std::vector<AblationRow> ablate_scales(const TaskSpec& task, const std::vector<int>& k_list,
                                              uint64_t seed, int n_demos = 200,
                                              int tok_epochs = 150, int pol_epochs = 30,
                                              int n_eval = 50) {
    for (int k : k_list)
        if (k < 1 || k > 8) throw std::invalid_argument("ablate_scales: K must be in [1,8]");
    auto demos = generate_demos(task, n_demos, seed);
    std::vector<AblationRow> rows;
    for (int k : k_list) {
        TokenizerConfig tcfg = TokenizerConfig::defaults(k);
        TrainConfig tok_tc;
        tok_tc.epochs = tok_epochs;
        tok_tc.lr = 2e-3f;
        TrainReport tok_rep;
        auto tok_arts = train_tokenizer_stage(demos, tcfg, tok_tc, seed, &tok_rep);

        PolicyConfig pcfg = PolicyConfig::for_tokenizer(tcfg, 2, task.obs_dim());
        TrainConfig pol_tc;
        pol_tc.epochs = pol_epochs;
        pol_tc.batch = 64;
        auto pol_arts = train_policy_stage(demos, std::move(tok_arts), pcfg, pol_tc, seed);
        auto metrics = evaluate(pol_arts, task, n_eval, seed + 1);

        AblationRow row;
        row.K = k;
        row.recon_mse = tok_rep.metrics.at("holdout_recon_mse").get<double>();
        row.success = metrics.success_rate;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace carp
