#pragma once
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "noisyquant/error.hpp"

namespace nq {

inline constexpr const char* kToolVersion = "0.1.0";

// Atomic file write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("write_file_atomic: cannot open " + tmp.string());
        f << content;
        if (!f) throw IoError("write_file_atomic: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// FNV-1a over the file bytes; enough for integrity bookkeeping.
inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("hash_file: cannot open " + path.string());
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[8192];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (f.eof()) break;
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

// Every CLI command emits one of these; re-running from a manifest must
// reproduce all outputs bitwise (wall_clock excluded).
struct RunManifest {
    std::string command;
    nlohmann::json config;
    uint64_t seed = 0;
    nlohmann::json output_hashes = nlohmann::json::object();
    std::string version = kToolVersion;
    double wall_clock_s = 0.0;

    void add_output(const std::filesystem::path& p) { output_hashes[p.string()] = hash_file(p); }

    nlohmann::json to_json() const {
        return {{"command", command}, {"config", config},   {"seed", seed},
                {"outputs", output_hashes}, {"version", version}, {"wall_clock_s", wall_clock_s}};
    }

    static RunManifest from_json(const nlohmann::json& j) {
        RunManifest m;
        m.command = j.at("command");
        m.config = j.at("config");
        m.seed = j.at("seed");
        m.output_hashes = j.value("outputs", nlohmann::json::object());
        m.version = j.value("version", std::string(kToolVersion));
        m.wall_clock_s = j.value("wall_clock_s", 0.0);
        return m;
    }

    void save(const std::filesystem::path& path) const {
        write_file_atomic(path, to_json().dump(2) + "\n");
    }

    static RunManifest load(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw IoError("RunManifest: cannot open " + path.string());
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("RunManifest: malformed JSON: ") + e.what());
        }
        return from_json(j);
    }
};

class WallClock {
public:
    WallClock() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

} // namespace nq
