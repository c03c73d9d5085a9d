// Binary parameter checkpoints with a key=value sidecar.
//
// Layout (little-endian):
//   8 bytes  magic "KNITCKPT"
//   u32      format version (currently 1)
//   u32      scalar width in bytes (4 or 8)
//   u64      parameter count
//   then per parameter, in store order:
//     u32 name length, name bytes, u32 rows, u32 cols, raw row-major values
//
// Saving then reloading then saving again produces byte-identical files.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/autodiff.hpp"

namespace knit {

namespace detail {

constexpr char kCkptMagic[8] = {'K', 'N', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

} // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& ps) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::write_pod<std::uint32_t>(os, detail::kCkptVersion);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sizeof(S)));
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& p = ps.at(i);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rows()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.cols()));
        os.write(reinterpret_cast<const char*>(p.value.v.data()),
                 static_cast<std::streamsize>(p.value.v.size() * sizeof(S)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

// Loads into a fresh store; parameter names, order, and shapes come from the
// file. The scalar width in the file must match S exactly.
template <typename S>
ParamStore<S> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != detail::kCkptVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto width = detail::read_pod<std::uint32_t>(is);
    if (width != sizeof(S))
        throw std::runtime_error("checkpoint: scalar width " + std::to_string(width) +
                                 " does not match requested width " + std::to_string(sizeof(S)));
    const auto count = detail::read_pod<std::uint64_t>(is);
    ParamStore<S> ps;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rows = detail::read_pod<std::uint32_t>(is);
        const auto cols = detail::read_pod<std::uint32_t>(is);
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        auto& p = ps.create(name, static_cast<int>(rows), static_cast<int>(cols));
        is.read(reinterpret_cast<char*>(p.value.v.data()),
                static_cast<std::streamsize>(p.value.v.size() * sizeof(S)));
        if (!is) throw std::runtime_error("checkpoint: truncated values for " + name);
    }
    return ps;
}

// Sidecar metadata: one key=value per line, keys sorted for stable output.
inline void save_meta(const std::string& path, const std::map<std::string, std::string>& kv) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("meta: cannot open for write: " + path);
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

inline std::map<std::string, std::string> load_meta(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("meta: cannot open: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("meta: missing '=' on line " + std::to_string(lineno) +
                                     " of " + path);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

} // namespace knit
