#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "carp/norm.hpp"
#include "carp/policy.hpp"
#include "carp/tokenizer.hpp"

namespace carp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");
static_assert(sizeof(float) == 4);

/// Binary container: "CARP" magic, u32 version, u64 header length, JSON
/// header (configs, stats, tensor manifest with payload-relative offsets),
/// then raw float32 payloads in manifest order.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };

    nlohmann::ordered_json meta;
    std::vector<Entry> tensors;

    const Entry& find(const std::string& name) const {
        for (const auto& e : tensors)
            if (e.name == name) return e;
        throw std::runtime_error("checkpoint: missing tensor " + name);
    }

    void save(const std::string& path) const {
        nlohmann::ordered_json header = meta;
        auto& manifest = header["tensors"];
        manifest = nlohmann::ordered_json::array();
        uint64_t offset = 0;
        for (const auto& e : tensors) {
            nlohmann::ordered_json m;
            m["name"] = e.name;
            m["shape"] = e.shape;
            m["offset"] = offset;
            manifest.push_back(std::move(m));
            offset += e.data.size() * 4;
        }
        std::string hdr = header.dump();

        std::string tmp = path + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw std::runtime_error("cannot write " + tmp);
            out.write("CARP", 4);
            uint32_t ver = kVersion;
            out.write(reinterpret_cast<const char*>(&ver), 4);
            uint64_t hlen = hdr.size();
            out.write(reinterpret_cast<const char*>(&hlen), 8);
            out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
            for (const auto& e : tensors)
                out.write(reinterpret_cast<const char*>(e.data.data()),
                          static_cast<std::streamsize>(e.data.size() * 4));
            if (!out) throw std::runtime_error("write failed: " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "CARP", 4) != 0)
            throw std::runtime_error(path + ": bad magic");
        uint32_t ver = 0;
        in.read(reinterpret_cast<char*>(&ver), 4);
        if (ver != kVersion)
            throw std::runtime_error(path + ": unsupported version " + std::to_string(ver));
        uint64_t hlen = 0;
        in.read(reinterpret_cast<char*>(&hlen), 8);
        std::string hdr(hlen, '\0');
        in.read(hdr.data(), static_cast<std::streamsize>(hlen));
        if (!in) throw std::runtime_error(path + ": truncated header");

        Checkpoint ck;
        ck.meta = nlohmann::ordered_json::parse(hdr);
        auto manifest = ck.meta.at("tensors");
        ck.meta.erase("tensors");
        std::streampos payload_base = in.tellg();
        for (const auto& m : manifest) {
            Entry e;
            e.name = m.at("name").get<std::string>();
            e.shape = m.at("shape").get<Shape>();
            uint64_t off = m.at("offset").get<uint64_t>();
            int64_t n = 1;
            for (int d : e.shape) n *= d;
            e.data.resize(static_cast<size_t>(n));
            in.seekg(payload_base + static_cast<std::streamoff>(off));
            in.read(reinterpret_cast<char*>(e.data.data()), n * 4);
            if (!in) throw std::runtime_error(path + ": truncated payload for " + e.name);
            ck.tensors.push_back(std::move(e));
        }
        return ck;
    }
};

inline nlohmann::ordered_json to_json(const TokenizerConfig& c) {
    nlohmann::ordered_json j;
    j["H"] = c.H;
    j["K"] = c.K;
    j["L"] = c.L;
    j["C"] = c.C;
    j["V"] = c.V;
    j["scale_lens"] = c.scale_lens;
    j["enc_ch0"] = c.enc_ch0;
    j["enc_ch1"] = c.enc_ch1;
    j["commit_weight"] = c.commit_weight;
    j["quant_weight"] = c.quant_weight;
    return j;
}

inline TokenizerConfig tokenizer_config_from_json(const nlohmann::ordered_json& j) {
    TokenizerConfig c;
    c.H = j.at("H");
    c.K = j.at("K");
    c.L = j.at("L");
    c.C = j.at("C");
    c.V = j.at("V");
    c.scale_lens = j.at("scale_lens").get<std::vector<int>>();
    c.enc_ch0 = j.at("enc_ch0");
    c.enc_ch1 = j.at("enc_ch1");
    c.commit_weight = j.at("commit_weight");
    c.quant_weight = j.at("quant_weight");
    c.validate();
    return c;
}

inline nlohmann::ordered_json to_json(const PolicyConfig& c) {
    nlohmann::ordered_json j;
    j["width"] = c.width;
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["K"] = c.K;
    j["scale_lens"] = c.scale_lens;
    j["V"] = c.V;
    j["C"] = c.C;
    j["D"] = c.D;
    j["O"] = c.O;
    j["obs_dim"] = c.obs_dim;
    j["num_tasks"] = c.num_tasks;
    return j;
}

inline PolicyConfig policy_config_from_json(const nlohmann::ordered_json& j) {
    PolicyConfig c;
    c.width = j.at("width");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.K = j.at("K");
    c.scale_lens = j.at("scale_lens").get<std::vector<int>>();
    c.V = j.at("V");
    c.C = j.at("C");
    c.D = j.at("D");
    c.O = j.at("O");
    c.obs_dim = j.at("obs_dim");
    c.num_tasks = j.at("num_tasks");
    c.validate();
    return c;
}

inline nlohmann::ordered_json to_json(const NormStats& s) {
    nlohmann::ordered_json j;
    j["min"] = s.min;
    j["max"] = s.max;
    return j;
}

inline NormStats norm_stats_from_json(const nlohmann::ordered_json& j) {
    NormStats s;
    s.min = j.at("min").get<std::vector<float>>();
    s.max = j.at("max").get<std::vector<float>>();
    if (s.min.size() != s.max.size()) throw std::runtime_error("norm stats: min/max size mismatch");
    return s;
}

/// Frozen stage-1 artifacts: one tokenizer per action dimension plus the
/// normalization fitted on the training actions.
struct TokenizerArtifacts {
    TokenizerConfig config;
    NormStats stats;
    std::vector<DimTokenizer> tokenizers;
};

inline void add_tokenizer_segments(Checkpoint& ck, TokenizerArtifacts& arts) {
    ck.meta["tokenizer_config"] = to_json(arts.config);
    ck.meta["norm_stats"] = to_json(arts.stats);
    ck.meta["action_dims"] = static_cast<int>(arts.tokenizers.size());
    for (size_t d = 0; d < arts.tokenizers.size(); ++d)
        for (auto& [name, t] : arts.tokenizers[d].all_named_params())
            ck.tensors.push_back({"tok" + std::to_string(d) + "." + name, t.shape(), t.value()});
}

inline TokenizerArtifacts tokenizer_from_checkpoint(const Checkpoint& ck) {
    TokenizerArtifacts arts{tokenizer_config_from_json(ck.meta.at("tokenizer_config")),
                            norm_stats_from_json(ck.meta.at("norm_stats")),
                            {}};
    int D = ck.meta.at("action_dims");
    Rng scratch(0);
    for (int d = 0; d < D; ++d) {
        arts.tokenizers.emplace_back(arts.config, scratch);
        for (auto& [name, t] : arts.tokenizers.back().all_named_params()) {
            const auto& e = ck.find("tok" + std::to_string(d) + "." + name);
            if (e.shape != t.shape())
                throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
            t.mut_value() = e.data;
        }
    }
    return arts;
}

inline void save_tokenizer_checkpoint(const std::string& path, TokenizerArtifacts& arts) {
    Checkpoint ck;
    ck.meta["kind"] = "tokenizer";
    add_tokenizer_segments(ck, arts);
    ck.save(path);
}

inline TokenizerArtifacts load_tokenizer_checkpoint(const std::string& path) {
    return tokenizer_from_checkpoint(Checkpoint::load(path));
}

/// Stage-2 artifacts. The tokenizer segments are embedded so evaluation
/// needs only this one file. EMA values parallel Policy::named_params order.
struct PolicyArtifacts {
    TokenizerArtifacts tok;
    PolicyConfig config;
    std::optional<Policy> policy;
    std::vector<std::vector<float>> ema;
    bool ema_enabled = true;
    std::string task;
};

inline void save_policy_checkpoint(const std::string& path, PolicyArtifacts& arts) {
    Checkpoint ck;
    ck.meta["kind"] = "policy";
    ck.meta["task"] = arts.task;
    ck.meta["policy_config"] = to_json(arts.config);
    ck.meta["sampler_topk"] = arts.config.sampler.k;
    ck.meta["ema"] = arts.ema_enabled;
    add_tokenizer_segments(ck, arts.tok);
    auto named = arts.policy->named_params();
    for (auto& [name, t] : named)
        ck.tensors.push_back({"policy." + name, t.shape(), t.value()});
    if (arts.ema.size() != named.size())
        throw std::runtime_error("checkpoint: EMA segment count mismatch");
    for (size_t i = 0; i < named.size(); ++i)
        ck.tensors.push_back({"ema." + named[i].first, named[i].second.shape(), arts.ema[i]});
    ck.save(path);
}

inline PolicyArtifacts load_policy_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", std::string()) != "policy")
        throw std::runtime_error(path + ": not a policy checkpoint");
    PolicyArtifacts arts;
    arts.tok = tokenizer_from_checkpoint(ck);
    arts.config = policy_config_from_json(ck.meta.at("policy_config"));
    arts.config.sampler.k = ck.meta.value("sampler_topk", 3);
    arts.ema_enabled = ck.meta.at("ema");
    arts.task = ck.meta.at("task");
    arts.config.validate_against(arts.tok.config);
    Rng scratch(0);
    arts.policy.emplace(arts.config, scratch);
    for (auto& [name, t] : arts.policy->named_params()) {
        const auto& e = ck.find("policy." + name);
        if (e.shape != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
        t.mut_value() = e.data;
        arts.ema.push_back(ck.find("ema." + name).data);
    }
    return arts;
}

}  // namespace carp
