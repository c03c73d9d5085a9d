// File-backed knowledge store: entity descriptions (dictionary-style) and
// entity embedding vectors (graph-style). Read-only after load.
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/vocab.hpp"

namespace knit {

// Per-entity text budget; longer definitions are truncated whole-token.
// Keeps assembled sequence lengths predictable when several entities fire.
constexpr int kDescriptionTokenCap = 32;

struct Description {
    std::vector<std::string> tokens; // "surface : definition…"
    std::vector<int> ids;
};

class KnowledgeStore {
public:
    struct LookupResult {
        const Description* description = nullptr;
        const std::vector<double>* embedding = nullptr;
        bool any() const { return description || embedding; }
    };

    // Dictionary TSV: entity_id \t surface \t definition. Stored token
    // sequence is the surface, a colon, then the definition tokens.
    void read_dictionary(const std::string& path, const Vocabulary& vocab) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("dictionary: cannot open: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto t1 = line.find('\t');
            const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
            if (t2 == std::string::npos)
                fail(path, lineno, "expected entity_id<TAB>surface<TAB>definition");
            const std::string id = line.substr(0, t1);
            const std::string surface = line.substr(t1 + 1, t2 - t1 - 1);
            const std::string definition = line.substr(t2 + 1);
            if (id.empty()) fail(path, lineno, "empty entity_id");
            if (surface.empty()) fail(path, lineno, "empty surface");
            if (descriptions_.count(id)) fail(path, lineno, "duplicate entity_id '" + id + "'");
            Description d;
            d.tokens.push_back(surface);
            d.tokens.push_back(":");
            for (auto& tok : split_whitespace(definition)) d.tokens.push_back(std::move(tok));
            if (d.tokens.size() == 2) fail(path, lineno, "empty definition for '" + id + "'");
            if (d.tokens.size() > kDescriptionTokenCap) d.tokens.resize(kDescriptionTokenCap);
            d.ids = vocab.encode(d.tokens);
            descriptions_.emplace(id, std::move(d));
        }
    }

    // Embedding text file: entity_id v1 v2 … v_dk, space separated.
    void read_embeddings(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("embeddings: cannot open: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto fields = split_whitespace(line);
            if (fields.size() < 2) fail(path, lineno, "expected entity_id followed by values");
            const std::string id = fields[0];
            std::vector<double> vec;
            for (std::size_t i = 1; i < fields.size(); ++i) {
                char* end = nullptr;
                const double v = std::strtod(fields[i].c_str(), &end);
                if (end == fields[i].c_str() || *end != '\0')
                    fail(path, lineno, "non-numeric embedding value '" + fields[i] + "'");
                vec.push_back(v);
            }
            for (double x : vec)
                if (!std::isfinite(x)) fail(path, lineno, "non-finite embedding value for '" + id + "'");
            if (dk_ < 0) {
                dk_ = static_cast<int>(vec.size());
            } else if (static_cast<int>(vec.size()) != dk_) {
                fail(path, lineno, "dimension " + std::to_string(vec.size()) +
                                       " does not match established d_k " + std::to_string(dk_));
            }
            if (embeddings_.count(id)) fail(path, lineno, "duplicate entity_id '" + id + "'");
            embeddings_.emplace(id, std::move(vec));
        }
    }

    LookupResult lookup(const std::string& entity_id) const {
        LookupResult r;
        if (const auto it = descriptions_.find(entity_id); it != descriptions_.end())
            r.description = &it->second;
        if (const auto it = embeddings_.find(entity_id); it != embeddings_.end())
            r.embedding = &it->second;
        return r;
    }

    int embedding_dim() const { return dk_; }
    std::size_t description_count() const { return descriptions_.size(); }
    std::size_t embedding_count() const { return embeddings_.size(); }
    const std::map<std::string, Description>& descriptions() const { return descriptions_; }
    const std::map<std::string, std::vector<double>>& embeddings() const { return embeddings_; }

private:
    [[noreturn]] static void fail(const std::string& path, int lineno, const std::string& why) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + why);
    }

    std::map<std::string, Description> descriptions_;
    std::map<std::string, std::vector<double>> embeddings_;
    int dk_ = -1;
};

inline KnowledgeStore load_dictionary(const std::string& path, const Vocabulary& vocab) {
    KnowledgeStore s;
    s.read_dictionary(path, vocab);
    return s;
}

inline KnowledgeStore load_embeddings(const std::string& path) {
    KnowledgeStore s;
    s.read_embeddings(path);
    return s;
}

// Writers used by the synthetic-data generator; floats are printed with
// enough digits to round-trip exactly through the loader.
inline void write_dictionary(const std::string& path,
                             const std::vector<std::tuple<std::string, std::string, std::string>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("dictionary: cannot open for write: " + path);
    for (const auto& [id, surface, definition] : rows)
        os << id << "\t" << surface << "\t" << definition << "\n";
}

inline void write_embeddings(const std::string& path,
                             const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("embeddings: cannot open for write: " + path);
    char buf[64];
    for (const auto& [id, vec] : rows) {
        os << id;
        for (double v : vec) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << " " << buf;
        }
        os << "\n";
    }
}

} // namespace knit
