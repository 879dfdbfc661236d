#pragma once

// Artifact persistence: deterministic JSON text, atomic file writes and a hashed manifest.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "config.hpp"

namespace vortexkam {

namespace io {

/// Fixed 17-significant-digit rendering; non-finite values become strings so the document
/// stays valid JSON.
inline std::string format_double(double x) {
    if (std::isnan(x)) return "\"nan\"";
    if (std::isinf(x)) return x > 0 ? "\"inf\"" : "\"-inf\"";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    std::string s(buf);
    // Keep integral doubles recognizable as floating point on reparse.
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

namespace detail {

inline void emit(std::ostringstream& os, const Json& v, int indent) {
    const std::string pad(static_cast<std::size_t>(indent + 2), ' '), close(static_cast<std::size_t>(indent), ' ');
    switch (v.type()) {
        case Json::value_t::object: {
            if (v.empty()) {
                os << "{}";
                return;
            }
            os << "{\n";
            bool first = true;
            for (auto it = v.begin(); it != v.end(); ++it) {
                if (!first) os << ",\n";
                first = false;
                os << pad << Json(it.key()).dump() << ": ";
                emit(os, it.value(), indent + 2);
            }
            os << '\n' << close << '}';
            return;
        }
        case Json::value_t::array: {
            if (v.empty()) {
                os << "[]";
                return;
            }
            // Arrays of scalars stay on one line.
            bool scalars = true;
            for (const auto& e : v) scalars = scalars && !e.is_structured();
            if (scalars) {
                os << '[';
                for (std::size_t i = 0; i < v.size(); ++i) {
                    if (i) os << ", ";
                    emit(os, v[i], indent);
                }
                os << ']';
                return;
            }
            os << "[\n";
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) os << ",\n";
                os << pad;
                emit(os, v[i], indent + 2);
            }
            os << '\n' << close << ']';
            return;
        }
        case Json::value_t::number_float: os << format_double(v.get<double>()); return;
        default: os << v.dump(); return;
    }
}

}  // namespace detail

inline std::string to_text(const Json& v) {
    std::ostringstream os;
    detail::emit(os, v, 0);
    os << '\n';
    return os.str();
}

inline std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    require(ctx != nullptr, "sha256: context allocation failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    require(ok, "sha256: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

/// Writes through a temporary file in the same directory and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& data) {
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), "cannot write '" + tmp.string() + "'");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.flush();
        require(static_cast<bool>(out), "write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

/// Records every file written into an output directory, with content hashes.
class ArtifactWriter {
public:
    explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    const std::filesystem::path& dir() const { return dir_; }

    void write(const std::string& name, const std::string& data) {
        write_atomic(dir_ / name, data);
        files_[name] = {sha256_hex(data), data.size()};
    }
    void write_json(const std::string& name, const Json& doc) { write(name, to_text(doc)); }

    void add_timing(const std::string& step, double seconds) { timing_[step] = seconds; }

    /// manifest.json: tool version, subcommand, seed, per-step wall time and the file list.
    void finish(const std::string& subcommand, std::uint64_t seed) {
        Json m;
        m["tool"] = "vortexkam";
        m["version"] = kVersion;
        m["subcommand"] = subcommand;
        m["seed"] = seed;
        m["timing_seconds"] = Json::object();
        for (const auto& [k, v] : timing_) m["timing_seconds"][k] = v;
        m["files"] = Json::array();
        for (const auto& [name, info] : files_)
            m["files"].push_back({{"name", name}, {"sha256", info.first}, {"bytes", info.second}});
        write_atomic(dir_ / "manifest.json", to_text(m));
    }

    static constexpr const char* kVersion = "1.0.0";

private:
    std::filesystem::path dir_;
    std::map<std::string, std::pair<std::string, std::size_t>> files_;
    std::map<std::string, double> timing_;
};

}  // namespace io

}  // namespace vortexkam
