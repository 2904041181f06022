#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "carp/envs.hpp"

namespace carp {

/// One demo per JSON line: {"task","seed","mode","obs","act"}. Lines are
/// written with a fixed key order so regeneration is byte-identical.
inline void write_demos(const std::string& path, const std::vector<Demo>& demos) {
    namespace fs = std::filesystem;
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        for (const auto& d : demos) {
            nlohmann::ordered_json j;
            j["task"] = d.task;
            j["seed"] = d.seed;
            if (d.mode.empty())
                j["mode"] = nullptr;
            else
                j["mode"] = d.mode;
            j["obs"] = d.obs;
            j["act"] = d.act;
            out << j.dump() << "\n";
        }
    }
    fs::rename(tmp, path);
}

inline std::vector<Demo> read_demos(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::vector<Demo> demos;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ": bad JSON on line " + std::to_string(lineno) +
                                     ": " + e.what());
        }
        Demo d;
        try {
            d.task = j.at("task").get<std::string>();
            d.seed = j.at("seed").get<uint64_t>();
            if (!j.at("mode").is_null()) d.mode = j.at("mode").get<std::string>();
            d.obs = j.at("obs").get<std::vector<std::vector<float>>>();
            d.act = j.at("act").get<std::vector<std::vector<float>>>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ": bad demo on line " + std::to_string(lineno) +
                                     ": " + e.what());
        }
        if (d.obs.size() != d.act.size())
            throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                                     ": obs/act row counts differ");
        for (const auto& rows : {std::cref(d.obs), std::cref(d.act)})
            for (const auto& row : rows.get())
                for (float v : row)
                    if (!std::isfinite(v))
                        throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                                                 ": non-finite value");
        demos.push_back(std::move(d));
    }
    return demos;
}

}  // namespace carp
