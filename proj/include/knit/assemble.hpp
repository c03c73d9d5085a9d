// Model-input assembly for the knowledge-as-text methods: concatenate
// entity descriptions with the input sentence (append or insert-after
// layouts) and derive the visibility mask that confines each description
// to itself and to its anchor token.
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/annotations.hpp"
#include "knit/kstore.hpp"
#include "knit/tensor.hpp"
#include "knit/autodiff.hpp"

namespace knit {

enum class Layout { append, insert_after };

struct Segment {
    int entity_index; // index into the source TokenSequence's span list
    int anchor;       // assembled position of the span's first token
    int begin;        // half-open token range of the description block
    int end;          //   (includes the trailing SEP under append layout)
};

struct AssembledInput {
    Layout layout = Layout::append;
    std::vector<int> ids;
    std::vector<std::string> tokens;
    std::vector<int> positions; // sequential 0..T-1
    int base_len = 0;           // one past the first SEP: the x region incl. CLS/SEP
    int x_len = 0;              // raw sentence length; x tokens sit at 1..x_len
    std::vector<Segment> segments;
    int dropped_descriptions = 0;
    std::vector<std::string> unresolved_entities;

    int length() const { return static_cast<int>(ids.size()); }
};

// Builds [CLS] x [SEP] d1 [SEP] d2 [SEP] … (append) or splices each
// description directly after its span (insert-after). Spans without a
// description in the store are skipped and reported. When the result would
// exceed max_len, whole descriptions are dropped last-first; x itself is
// never truncated here.
inline AssembledInput assemble(const TokenSequence& seq, const KnowledgeStore& store,
                               Layout layout, int max_len) {
    if (seq.ids.size() != seq.tokens.size())
        throw std::logic_error("assemble: sequence not encoded against a vocabulary");
    const int L = seq.length();
    if (L + 2 > max_len)
        throw std::invalid_argument("assemble: input of length " + std::to_string(L) +
                                    " cannot fit max_len " + std::to_string(max_len));

    AssembledInput out;
    out.layout = layout;
    out.x_len = L;

    struct Cand {
        int entity_index;
        const Description* desc;
        const EntitySpan* span;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < seq.spans.size(); ++i) {
        const auto& span = seq.spans[i];
        const auto hit = store.lookup(span.entity_id);
        if (hit.description) {
            cands.push_back({static_cast<int>(i), hit.description, &span});
        } else {
            out.unresolved_entities.push_back(span.entity_id);
        }
    }

    const int sep_per_desc = layout == Layout::append ? 1 : 0;
    int total = L + 2;
    for (const auto& c : cands) total += static_cast<int>(c.desc->tokens.size()) + sep_per_desc;
    while (total > max_len && !cands.empty()) {
        total -= static_cast<int>(cands.back().desc->tokens.size()) + sep_per_desc;
        cands.pop_back();
        ++out.dropped_descriptions;
    }

    auto push = [&out](int id, const std::string& tok) {
        out.ids.push_back(id);
        out.tokens.push_back(tok);
    };

    if (layout == Layout::append) {
        push(Vocabulary::kCls, "[CLS]");
        for (int t = 0; t < L; ++t) push(seq.ids[t], seq.tokens[t]);
        push(Vocabulary::kSep, "[SEP]");
        out.base_len = L + 2;
        for (const auto& c : cands) {
            Segment seg;
            seg.entity_index = c.entity_index;
            seg.anchor = 1 + c.span->p;
            seg.begin = out.length();
            for (std::size_t t = 0; t < c.desc->tokens.size(); ++t)
                push(c.desc->ids[t], c.desc->tokens[t]);
            push(Vocabulary::kSep, "[SEP]");
            seg.end = out.length();
            out.segments.push_back(seg);
        }
    } else {
        push(Vocabulary::kCls, "[CLS]");
        std::size_t next = 0;
        for (int t = 0; t < L; ++t) {
            push(seq.ids[t], seq.tokens[t]);
            while (next < cands.size() && cands[next].span->q == t) {
                Segment seg;
                seg.entity_index = cands[next].entity_index;
                seg.anchor = out.length() - (t - cands[next].span->p) - 1;
                seg.begin = out.length();
                const auto* d = cands[next].desc;
                for (std::size_t k = 0; k < d->tokens.size(); ++k) push(d->ids[k], d->tokens[k]);
                seg.end = out.length();
                out.segments.push_back(seg);
                ++next;
            }
        }
        push(Vocabulary::kSep, "[SEP]");
        out.base_len = out.length(); // the first SEP is the final token
    }

    out.positions.resize(out.ids.size());
    for (int t = 0; t < out.length(); ++t) out.positions[t] = t;
    return out;
}

// Additive T×T attention mask; entries are conceptually {0, −∞} and stored
// as a boolean visibility pattern.
struct VisibilityMask {
    int T = 0;
    std::vector<std::uint8_t> visible;

    bool at(int j, int k) const {
        return visible[static_cast<std::size_t>(j) * T + k] != 0;
    }

    template <typename S>
    Tensor<S> additive() const {
        Tensor<S> m(T, T);
        for (std::size_t i = 0; i < visible.size(); ++i)
            m.v[i] = visible[i] ? S(0) : kMaskedSentinel<S>;
        return m;
    }
};

// Token j may attend to token k iff (a) both lie in the x region, (b) both
// lie in the same description segment, or (c) j is the anchor of segment i
// and k lies in segment i. Defined only for the append layout, where
// descriptions form contiguous blocks.
inline VisibilityMask build_visibility_mask(const AssembledInput& inp) {
    if (inp.layout != Layout::append)
        throw std::invalid_argument("visibility mask is defined only for the append layout");
    const int T = inp.length();
    // region id per position: -1 for the x block, else the segment index
    std::vector<int> region(static_cast<std::size_t>(T), -1);
    for (std::size_t s = 0; s < inp.segments.size(); ++s)
        for (int t = inp.segments[s].begin; t < inp.segments[s].end; ++t)
            region[static_cast<std::size_t>(t)] = static_cast<int>(s);

    VisibilityMask m;
    m.T = T;
    m.visible.assign(static_cast<std::size_t>(T) * T, 0);
    for (int j = 0; j < T; ++j) {
        for (int k = 0; k < T; ++k) {
            bool vis = false;
            if (region[j] == -1 && region[k] == -1) {
                vis = true;
            } else if (region[j] != -1 && region[j] == region[k]) {
                vis = true;
            } else if (region[j] == -1 && region[k] != -1 &&
                       inp.segments[static_cast<std::size_t>(region[k])].anchor == j) {
                vis = true;
            }
            m.visible[static_cast<std::size_t>(j) * T + k] = vis ? 1 : 0;
        }
    }
    return m;
}

// Debug exports for golden-file comparisons: PGM (visible=white) and 0/1 CSV.
inline void write_mask_pgm(const std::string& path, const VisibilityMask& m) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("mask pgm: cannot open for write: " + path);
    os << "P2\n" << m.T << " " << m.T << "\n255\n";
    for (int j = 0; j < m.T; ++j) {
        for (int k = 0; k < m.T; ++k) os << (m.at(j, k) ? 255 : 0) << (k + 1 < m.T ? " " : "");
        os << "\n";
    }
}

inline void write_mask_csv(const std::string& path, const VisibilityMask& m) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("mask csv: cannot open for write: " + path);
    for (int j = 0; j < m.T; ++j) {
        for (int k = 0; k < m.T; ++k) os << (m.at(j, k) ? 1 : 0) << (k + 1 < m.T ? "," : "");
        os << "\n";
    }
}

} // namespace knit
