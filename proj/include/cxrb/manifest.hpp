#pragma once

// Run manifest written next to the artifacts of every command: what ran,
// with which configuration and seeds, what it read (with SHA-256) and wrote.
// Needs OpenSSL's libcrypto.

#include "cxrb/errors.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace cxrb {

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string sha256_file(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot hash " + path.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 unavailable");
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(is.gcount()));
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

class RunManifest {
public:
    explicit RunManifest(std::string command)
        : command_(std::move(command)), start_(std::chrono::steady_clock::now()),
          started_at_(std::chrono::system_clock::now())
    {
    }

    void set_config(nlohmann::json config) { config_ = std::move(config); }
    void add_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
    void add_input(const std::filesystem::path& p) { inputs_.push_back(p); }
    void add_output(const std::filesystem::path& p) { outputs_.push_back(p); }
    template <class Range>
    void add_outputs(const Range& paths)
    {
        for (const auto& p : paths) add_output(p);
    }

    nlohmann::json to_json() const
    {
        nlohmann::json in = nlohmann::json::array();
        for (const auto& p : inputs_) in.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
        nlohmann::json out = nlohmann::json::array();
        for (const auto& p : outputs_) out.push_back(p.string());
        const auto t = std::chrono::system_clock::to_time_t(started_at_);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        return {{"command", command_},
                {"config", config_},
                {"seeds", seeds_},
                {"inputs", in},
                {"outputs", out},
                {"version", kToolVersion},
                {"started_at", stamp},
                {"wall_clock_seconds",
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()}};
    }

    /// Writes manifest.json into `dir` and returns its path.
    std::filesystem::path write(const std::filesystem::path& dir) const
    {
        std::filesystem::create_directories(dir);
        const auto path = dir / "manifest.json";
        std::ofstream os(path);
        if (!os) throw FormatError("cannot write " + path.string());
        os << to_json().dump(2) << '\n';
        return path;
    }

private:
    std::string command_;
    nlohmann::json config_ = nlohmann::json::object();
    nlohmann::json seeds_ = nlohmann::json::object();
    std::vector<std::filesystem::path> inputs_;
    std::vector<std::filesystem::path> outputs_;
    std::chrono::steady_clock::time_point start_;
    std::chrono::system_clock::time_point started_at_;
};

} // namespace cxrb
