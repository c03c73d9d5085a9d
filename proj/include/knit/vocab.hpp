// Token vocabulary with fixed reserved ids and whitespace-level encoding.
// The toolkit does no subword splitting; annotation files carry final tokens.
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace knit {

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kReservedCount = 5;

    Vocabulary() {
        for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(t);
    }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        const int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    int id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

    const std::string& token_of(int id) const {
        if (id < 0 || id >= static_cast<int>(id_to_token_.size()))
            throw std::out_of_range("token id out of range: " + std::to_string(id));
        return id_to_token_[id];
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(id_of(t));
        return ids;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> tokens;
        tokens.reserve(ids.size());
        for (int id : ids) tokens.push_back(token_of(id));
        return tokens;
    }

    // One token per line in id order; reserved entries included.
    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("vocab: cannot open for write: " + path);
        for (const auto& t : id_to_token_) os << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("vocab: cannot open: " + path);
        Vocabulary v;
        std::string line;
        int id = 0;
        while (std::getline(is, line)) {
            if (id < kReservedCount) {
                if (line != v.id_to_token_[id])
                    throw std::runtime_error("vocab: reserved slot " + std::to_string(id) +
                                             " holds '" + line + "'");
            } else {
                v.add(line);
            }
            ++id;
        }
        if (id < kReservedCount) throw std::runtime_error("vocab: file too short: " + path);
        return v;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

inline std::vector<std::string> split_whitespace(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

// Tokens with corpus frequency >= min_freq get ids, in first-appearance
// order; everything else maps to UNK at encode time.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus_lines, int min_freq) {
    if (corpus_lines.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
    std::unordered_map<std::string, int> freq;
    std::vector<std::string> order;
    for (const auto& line : corpus_lines) {
        for (auto& tok : split_whitespace(line)) {
            auto [it, fresh] = freq.emplace(std::move(tok), 0);
            it->second += 1;
            if (fresh) order.push_back(it->first);
        }
    }
    Vocabulary v;
    for (const auto& tok : order) {
        if (freq[tok] >= min_freq) v.add(tok);
    }
    return v;
}

} // namespace knit
