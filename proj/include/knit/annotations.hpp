// Ingestion of pre-annotated datasets: one JSON record per line carrying
// tokens, universal POS tags, entity spans, and a task label. Annotation
// (POS tagging, entity linking) happens offline; this file only validates
// and loads the result.
#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/vocab.hpp"

namespace knit {

// A contiguous entity mention [p, q] (end-inclusive, token units).
struct EntitySpan {
    int p = 0;
    int q = 0;
    std::string entity_id;
    std::string surface;
    bool from_linker = false;
};

struct TokenSequence {
    std::vector<std::string> tokens;
    std::vector<int> ids;                // empty until encoded against a vocabulary
    std::vector<std::string> pos_tags;   // universal POS, one per token
    std::vector<EntitySpan> spans;       // non-overlapping, sorted by p

    int length() const { return static_cast<int>(tokens.size()); }
};

// Task label: a number (classification index or regression target), free
// text (mapped to a class index upstream), or per-token tags.
struct Label {
    enum class Kind { number, text, tags };
    Kind kind = Kind::number;
    double number = 0.0;
    std::string text;
    std::vector<std::string> tags;
};

struct AnnotatedRecord {
    std::string text;
    TokenSequence seq;
    Label label;
};

inline const std::set<std::string>& upos_tags() {
    static const std::set<std::string> tags = {
        "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
        "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"};
    return tags;
}

namespace detail {

[[noreturn]] inline void reject(const std::string& path, int lineno, const std::string& why) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + why);
}

} // namespace detail

// Parses and validates every record; any malformed line is rejected with
// its line number. When a vocabulary is supplied, token ids are filled in
// (out-of-vocabulary tokens become UNK).
inline std::vector<AnnotatedRecord> load_annotations(const std::string& path,
                                                     const Vocabulary* vocab = nullptr) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("annotations: cannot open: " + path);
    std::vector<AnnotatedRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            detail::reject(path, lineno, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) detail::reject(path, lineno, "record is not an object");
        for (const char* field : {"text", "tokens", "pos", "spans", "label"})
            if (!j.contains(field)) detail::reject(path, lineno, std::string("missing field '") + field + "'");
        if (!j["text"].is_string()) detail::reject(path, lineno, "'text' must be a string");
        if (!j["tokens"].is_array() || j["tokens"].empty())
            detail::reject(path, lineno, "'tokens' must be a non-empty array");
        if (!j["pos"].is_array()) detail::reject(path, lineno, "'pos' must be an array");
        if (!j["spans"].is_array()) detail::reject(path, lineno, "'spans' must be an array");

        AnnotatedRecord rec;
        rec.text = j["text"].get<std::string>();
        for (const auto& t : j["tokens"]) {
            if (!t.is_string()) detail::reject(path, lineno, "'tokens' entries must be strings");
            rec.seq.tokens.push_back(t.get<std::string>());
        }
        const int L = rec.seq.length();
        if (j["pos"].size() != static_cast<std::size_t>(L))
            detail::reject(path, lineno, "'pos' length does not match 'tokens'");
        for (const auto& t : j["pos"]) {
            if (!t.is_string()) detail::reject(path, lineno, "'pos' entries must be strings");
            const auto tag = t.get<std::string>();
            if (!upos_tags().count(tag)) detail::reject(path, lineno, "unknown POS tag '" + tag + "'");
            rec.seq.pos_tags.push_back(tag);
        }
        for (const auto& s : j["spans"]) {
            if (!s.is_object()) detail::reject(path, lineno, "span entries must be objects");
            for (const char* field : {"start", "end", "entity_id", "source"})
                if (!s.contains(field))
                    detail::reject(path, lineno, std::string("span missing field '") + field + "'");
            if (!s["start"].is_number_integer() || !s["end"].is_number_integer())
                detail::reject(path, lineno, "span start/end must be integers");
            EntitySpan span;
            span.p = s["start"].get<int>();
            span.q = s["end"].get<int>();
            if (span.p < 0 || span.q < span.p || span.q >= L)
                detail::reject(path, lineno, "span [" + std::to_string(span.p) + "," +
                                                 std::to_string(span.q) + "] out of range for length " +
                                                 std::to_string(L));
            if (!s["entity_id"].is_string() || s["entity_id"].get<std::string>().empty())
                detail::reject(path, lineno, "span entity_id must be a non-empty string");
            span.entity_id = s["entity_id"].get<std::string>();
            const auto source = s["source"].is_string() ? s["source"].get<std::string>() : "";
            if (source != "pos" && source != "linker")
                detail::reject(path, lineno, "span source must be \"pos\" or \"linker\"");
            span.from_linker = (source == "linker");
            for (int t = span.p; t <= span.q; ++t) {
                span.surface += rec.seq.tokens[t];
                if (t < span.q) span.surface += " ";
            }
            rec.seq.spans.push_back(span);
        }
        std::sort(rec.seq.spans.begin(), rec.seq.spans.end(),
                  [](const EntitySpan& a, const EntitySpan& b) { return a.p < b.p; });
        for (std::size_t i = 1; i < rec.seq.spans.size(); ++i) {
            if (rec.seq.spans[i].p <= rec.seq.spans[i - 1].q)
                detail::reject(path, lineno, "overlapping spans at token " +
                                                 std::to_string(rec.seq.spans[i].p));
        }

        const auto& lab = j["label"];
        if (lab.is_number()) {
            rec.label.kind = Label::Kind::number;
            rec.label.number = lab.get<double>();
        } else if (lab.is_string()) {
            rec.label.kind = Label::Kind::text;
            rec.label.text = lab.get<std::string>();
        } else if (lab.is_array()) {
            rec.label.kind = Label::Kind::tags;
            if (lab.size() != static_cast<std::size_t>(L))
                detail::reject(path, lineno, "tag label length does not match 'tokens'");
            for (const auto& t : lab) {
                if (!t.is_string()) detail::reject(path, lineno, "tag labels must be strings");
                rec.label.tags.push_back(t.get<std::string>());
            }
        } else {
            detail::reject(path, lineno, "'label' must be a number, string, or array of strings");
        }

        if (vocab) rec.seq.ids = vocab->encode(rec.seq.tokens);
        out.push_back(std::move(rec));
    }
    return out;
}

enum class SelectionPolicy { content_pos, linker_provided };

// Filters spans without fabricating or reordering: content-pos keeps spans
// whose head token is a noun, verb, or adjective; linker-provided keeps
// spans produced by an entity linker.
inline std::vector<EntitySpan> select_entities(const TokenSequence& seq, SelectionPolicy policy) {
    std::vector<EntitySpan> out;
    for (const auto& span : seq.spans) {
        if (policy == SelectionPolicy::linker_provided) {
            if (span.from_linker) out.push_back(span);
        } else {
            const auto& head = seq.pos_tags.at(static_cast<std::size_t>(span.p));
            if (head == "NOUN" || head == "VERB" || head == "ADJ") out.push_back(span);
        }
    }
    return out;
}

} // namespace knit
