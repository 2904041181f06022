// Command-line front end: demo generation, two-stage training, closed-loop
// evaluation with trajectory export, and the scale-count ablation.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "carp/checkpoint.hpp"
#include "carp/dataset.hpp"
#include "carp/harness.hpp"

using namespace carp;

namespace {

std::map<std::string, std::string> parse_kv(const std::vector<std::string>& items) {
    std::map<std::string, std::string> kv;
    for (const auto& it : items) {
        auto eq = it.find('=');
        if (eq == std::string::npos)
            throw CLI::ValidationError("--config", "expected key=value, got '" + it + "'");
        kv[it.substr(0, eq)] = it.substr(eq + 1);
    }
    return kv;
}

int kv_int(const std::map<std::string, std::string>& kv, const std::string& key, int dflt) {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : std::stoi(it->second);
}

float kv_float(const std::map<std::string, std::string>& kv, const std::string& key, float dflt) {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : std::stof(it->second);
}

SamplerConfig parse_sampler(const std::string& s) {
    SamplerConfig cfg;
    if (s == "argmax") return cfg;
    if (s.rfind("topk:", 0) == 0) {
        cfg.kind = SamplerConfig::Kind::TopK;
        cfg.k = std::stoi(s.substr(5));
        if (cfg.k < 1) throw CLI::ValidationError("--sampler", "top-k needs k >= 1");
        return cfg;
    }
    throw CLI::ValidationError("--sampler", "expected 'argmax' or 'topk:<k>', got '" + s + "'");
}

void write_trajectory_csv(const std::string& path, const EvalMetrics& m, int K, int D) {
    std::ofstream out(path + ".tmp", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "episode,control_step,scale,t";
    for (int d = 0; d < D; ++d) out << ",dim_" << d;
    out << "\n";
    for (size_t ep = 0; ep < m.refinements.size(); ++ep) {
        const auto& tr = m.refinements[ep];
        for (size_t cs = 0; cs < tr.final_chunk.size(); ++cs) {
            auto emit = [&](int scale, const std::vector<std::vector<float>>& chunk) {
                for (size_t t = 0; t < chunk.size(); ++t) {
                    out << ep << "," << cs << "," << scale << "," << t;
                    for (int d = 0; d < D; ++d) out << "," << chunk[t][static_cast<size_t>(d)];
                    out << "\n";
                }
            };
            emit(0, tr.final_chunk[cs]);
            for (int k = 1; k <= K; ++k) emit(k, tr.per_scale[cs][static_cast<size_t>(k - 1)]);
        }
    }
    out.close();
    std::filesystem::rename(path + ".tmp", path);
}

int cmd_gen_demos(const std::string& task_name, int n, uint64_t seed, const std::string& out) {
    auto task = TaskSpec::by_name(task_name);
    auto demos = generate_demos(task, n, seed);
    write_demos(out, demos);
    std::printf("wrote %zu demos (task=%s seed=%llu) to %s\n", demos.size(), task.name.c_str(),
                static_cast<unsigned long long>(seed), out.c_str());
    return 0;
}

int cmd_train_tokenizer(const std::string& data, const std::vector<std::string>& config,
                        uint64_t seed, const std::string& out) {
    auto kv = parse_kv(config);
    auto demos = read_demos(data);
    TokenizerConfig cfg = TokenizerConfig::defaults(kv_int(kv, "k_scales", 4));
    cfg.V = kv_int(kv, "codebook", cfg.V);
    TrainConfig tc;
    tc.epochs = kv_int(kv, "epochs", 300);
    tc.batch = kv_int(kv, "batch", 256);
    tc.lr = kv_float(kv, "lr", 2e-3f);
    tc.phi_lr_scale = kv_float(kv, "phi_lr_scale", tc.phi_lr_scale);

    TrainReport rep;
    auto arts = train_tokenizer_stage(demos, cfg, tc, seed, &rep);
    save_tokenizer_checkpoint(out, arts);
    rep.save(out + ".report.json");
    std::printf("tokenizer trained: K=%d V=%d epochs=%d\n", cfg.K, cfg.V, tc.epochs);
    std::printf("holdout reconstruction MSE (normalized): %.6f\n",
                rep.metrics.at("holdout_recon_mse").get<double>());
    std::printf("wall seconds: %.1f\n", rep.wall_seconds);
    return 0;
}

int cmd_train_policy(const std::string& data, const std::string& tokenizer,
                     const std::vector<std::string>& config, uint64_t seed,
                     const std::string& out, bool no_ema) {
    auto kv = parse_kv(config);
    auto demos = read_demos(data);
    if (demos.empty()) throw std::runtime_error(data + ": no demos");
    auto tok_arts = load_tokenizer_checkpoint(tokenizer);

    int obs_dim = static_cast<int>(demos[0].obs[0].size());
    PolicyConfig cfg = PolicyConfig::for_tokenizer(tok_arts.config, 2, obs_dim);
    cfg.width = kv_int(kv, "width", cfg.width);
    cfg.layers = kv_int(kv, "layers", cfg.layers);
    cfg.heads = kv_int(kv, "heads", cfg.heads);
    TrainConfig tc;
    tc.epochs = kv_int(kv, "epochs", 60);
    tc.batch = kv_int(kv, "batch", 64);
    tc.lr = kv_float(kv, "lr", 1e-3f);
    tc.ema = !no_ema;

    TrainReport rep;
    auto arts = train_policy_stage(demos, std::move(tok_arts), cfg, tc, seed, &rep);
    arts.task = demos[0].task;
    save_policy_checkpoint(out, arts);
    rep.save(out + ".report.json");
    std::printf("policy trained: width=%d layers=%d epochs=%d ema=%s\n", cfg.width, cfg.layers,
                tc.epochs, tc.ema ? "true" : "false");
    std::printf("final training CE: %.4f (untrained would be ln %d = %.4f)\n",
                rep.epoch_losses.back(), cfg.V, std::log(static_cast<double>(cfg.V)));
    std::printf("wall seconds: %.1f\n", rep.wall_seconds);
    return 0;
}

int cmd_eval(const std::string& policy_path, const std::string& task_name, int episodes,
             uint64_t seed, const std::string& export_traj, const std::string& sampler,
             bool latency, bool no_ema, bool shared_init) {
    auto arts = load_policy_checkpoint(policy_path);
    auto task = TaskSpec::by_name(task_name.empty() ? arts.task : task_name);
    if (task.obs_dim() != arts.config.obs_dim)
        throw std::runtime_error("task '" + task.name + "' has obs_dim " +
                                 std::to_string(task.obs_dim()) + " but the policy expects " +
                                 std::to_string(arts.config.obs_dim));
    arts.config.sampler = parse_sampler(sampler);
    // sampler lives in the loaded config; predict reads it from there
    {
        PolicyArtifacts reloaded;
        reloaded.tok = std::move(arts.tok);
        reloaded.config = arts.config;
        Rng scratch(0);
        reloaded.policy.emplace(reloaded.config, scratch);
        auto src = arts.policy->named_params();
        auto dst = reloaded.policy->named_params();
        for (size_t i = 0; i < src.size(); ++i) dst[i].second.mut_value() = src[i].second.value();
        reloaded.ema = std::move(arts.ema);
        reloaded.ema_enabled = arts.ema_enabled;
        reloaded.task = arts.task;
        arts = std::move(reloaded);
    }

    EvalOptions opt;
    opt.export_refinement = !export_traj.empty();
    opt.use_ema = !no_ema;
    opt.shared_initial_state = shared_init;
    auto m = evaluate(arts, task, episodes, seed, opt);

    std::printf("task=%s episodes=%d sampler=%s\n", task.name.c_str(), episodes, sampler.c_str());
    std::printf("success rate: %.3f (%d/%d)\n", m.success_rate, m.successes, m.episodes);
    std::printf("mean episode steps: %.1f\n", m.mean_steps);
    std::printf("transformer passes per predict: %d\n", m.transformer_passes_per_predict);
    if (task.variant == TaskVariant::Waypoints) {
        std::printf("staged success:");
        for (size_t i = 0; i < m.staged.size(); ++i)
            std::printf(" p%zu=%.3f", i + 1, m.staged[i]);
        std::printf("\n");
    }
    if (task.variant == TaskVariant::Fork)
        std::printf("fork modes: left=%d right=%d\n", m.fork_left, m.fork_right);

    if (!export_traj.empty()) {
        write_trajectory_csv(export_traj, m, arts.config.K, arts.config.D);
        std::printf("trajectory export: %s\n", export_traj.c_str());
    }
    if (latency) {
        auto rep = measure_latency(arts, task, 400, 5, seed);
        std::printf("latency per 400 actions: %.3f s (std %.3f over %d runs), passes/predict=%d\n",
                    rep.mean_seconds, rep.std_seconds, rep.runs, rep.passes_per_predict);
    }
    return 0;
}

int cmd_ablate(const std::string& task_name, const std::string& k_list_s, uint64_t seed,
               const std::string& out_table, int n_demos, int tok_epochs, int pol_epochs,
               int episodes) {
    auto task = TaskSpec::by_name(task_name);
    std::vector<int> k_list;
    std::stringstream ss(k_list_s);
    std::string item;
    while (std::getline(ss, item, ',')) k_list.push_back(std::stoi(item));
    if (k_list.empty()) throw CLI::ValidationError("--k-list", "empty list");

    auto rows = ablate_scales(task, k_list, seed, n_demos, tok_epochs, pol_epochs, episodes);
    std::ofstream out(out_table + ".tmp", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + out_table);
    out << "K,recon_mse,success\n";
    for (const auto& r : rows) {
        out << r.K << "," << r.recon_mse << "," << r.success << "\n";
        std::printf("K=%d recon_mse=%.6f success=%.3f\n", r.K, r.recon_mse, r.success);
    }
    out.close();
    std::filesystem::rename(out_table + ".tmp", out_table);
    std::printf("ablation table: %s\n", out_table.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coarse-to-fine autoregressive visuomotor policy on 2D control tasks"};
    app.require_subcommand(1);

    std::string task = "reach", out, data, tokenizer, policy, export_traj, sampler = "argmax";
    std::string k_list = "1,2,3,4", out_table = "ablation.csv";
    std::vector<std::string> config;
    int n = 200, episodes = 50, n_demos = 200, tok_epochs = 150, pol_epochs = 30;
    uint64_t seed = 7;
    bool no_ema = false, latency = false, shared_init = false;

    auto* gen = app.add_subcommand("gen-demos", "generate expert demonstrations");
    gen->add_option("--task", task)->check(CLI::IsMember({"reach", "fork", "waypoints"}));
    gen->add_option("--n", n);
    gen->add_option("--seed", seed);
    gen->add_option("--out", out)->required();

    auto* tt = app.add_subcommand("train-tokenizer", "train the multi-scale action tokenizer");
    tt->add_option("--data", data)->required();
    tt->add_option("--config", config, "key=value overrides (k_scales, epochs, batch, lr)");
    tt->add_option("--seed", seed);
    tt->add_option("--out", out)->required();

    auto* tp = app.add_subcommand("train-policy", "train the next-scale prediction policy");
    tp->add_option("--data", data)->required();
    tp->add_option("--tokenizer", tokenizer)->required();
    tp->add_option("--config", config, "key=value overrides (width, layers, heads, epochs, batch, lr)");
    tp->add_option("--seed", seed);
    tp->add_option("--out", out)->required();
    tp->add_flag("--no-ema", no_ema);

    auto* ev = app.add_subcommand("eval", "closed-loop receding-horizon evaluation");
    ev->add_option("--policy", policy)->required();
    ev->add_option("--task", task, "defaults to the checkpoint's task");
    ev->add_option("--episodes", episodes);
    ev->add_option("--seed", seed);
    ev->add_option("--export-traj", export_traj, "CSV path for per-scale trajectory export");
    ev->add_option("--sampler", sampler, "argmax or topk:<k>");
    ev->add_flag("--latency", latency, "measure 400-action latency");
    ev->add_flag("--no-ema", no_ema, "evaluate live weights instead of the EMA shadow");
    ev->add_flag("--shared-init", shared_init, "reset every episode from the same state");

    auto* ab = app.add_subcommand("ablate", "scale-count ablation (full train+eval per K)");
    ab->add_option("--task", task)->check(CLI::IsMember({"reach", "fork", "waypoints"}));
    ab->add_option("--k-list", k_list);
    ab->add_option("--seed", seed);
    ab->add_option("--out-table", out_table);
    ab->add_option("--demos", n_demos);
    ab->add_option("--tok-epochs", tok_epochs);
    ab->add_option("--pol-epochs", pol_epochs);
    ab->add_option("--episodes", episodes);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_demos(task, n, seed, out);
        if (tt->parsed()) return cmd_train_tokenizer(data, config, seed, out);
        if (tp->parsed()) return cmd_train_policy(data, tokenizer, config, seed, out, no_ema);
        if (ev->parsed())
            return cmd_eval(policy, ev->count("--task") ? task : "", episodes, seed, export_traj,
                            sampler, latency, no_ema, shared_init);
        if (ab->parsed())
            return cmd_ablate(task, k_list, seed, out_table, n_demos, tok_epochs, pol_epochs,
                              episodes);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
