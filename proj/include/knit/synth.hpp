// Synthetic focus-entity benchmark. Each sentence names a focus entity in
// first position plus up to two distractor entities; every entity carries a
// latent binary attribute that is expressed ONLY in its dictionary
// definition (a marker word) and in a dedicated block of its graph
// embedding — never in the sentence itself. The sentence label is the focus
// entity's attribute, and train/dev sentences draw from disjoint entity
// pools, so a text-only model has nothing to generalize from while any
// model with access to definitions or embeddings can read the answer off.
#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "knit/annotations.hpp"
#include "knit/kstore.hpp"
#include "knit/rng.hpp"

namespace knit {

struct SynthSpec {
    int train_sentences = 2000;
    int dev_sentences = 500;
    int train_entities = 60;
    int dev_entities = 40;
    int sentence_length = 10; // fixed token count, entity mentions included
    int embed_dim = 16;
    int attribute_dims = 4; // leading embedding coordinates that encode the attribute
    int max_distractors = 2;
    std::uint64_t seed = 7;

    void validate() const {
        if (train_sentences < 2 || dev_sentences < 2)
            throw std::invalid_argument("synth: need at least two sentences per split");
        if (train_entities < 4 || dev_entities < 4)
            throw std::invalid_argument("synth: need at least four entities per pool");
        if (train_entities % 2 || dev_entities % 2)
            throw std::invalid_argument("synth: entity pool sizes must be even for balance");
        if (sentence_length < 4) throw std::invalid_argument("synth: sentences too short");
        if (embed_dim < 1 || attribute_dims < 1 || attribute_dims > embed_dim)
            throw std::invalid_argument("synth: bad embedding dimensions");
        if (max_distractors < 0 || max_distractors > sentence_length - 2)
            throw std::invalid_argument("synth: bad distractor count");
    }
};

struct SynthEntity {
    std::string id;
    std::string surface;
    int attribute = 0; // 0 or 1
    std::string definition;
    std::vector<double> embedding;
};

struct SynthData {
    std::vector<AnnotatedRecord> train;
    std::vector<AnnotatedRecord> dev;
    std::vector<SynthEntity> entities;   // train pool first, then dev pool
    int n_train_entities = 0;            // prefix length of the train pool
    std::map<std::string, int> attribute_of;
};

namespace detail {

inline const std::vector<std::pair<std::string, std::string>>& synth_fillers() {
    // token -> fixed UPOS tag; none of these are nouns/verbs/adjectives, so
    // filler tokens can never be selected as entity heads.
    static const std::vector<std::pair<std::string, std::string>> f = {
        {"the", "DET"},   {"a", "DET"},     {"and", "CCONJ"}, {"or", "CCONJ"},
        {"near", "ADP"},  {"under", "ADP"}, {"beside", "ADP"}, {"quite", "ADV"},
        {"rather", "ADV"}, {"often", "ADV"}, {"it", "PRON"},   {"this", "DET"},
        {"then", "ADV"},  {"while", "SCONJ"}};
    return f;
}

inline const std::vector<std::string>& synth_def_fillers() {
    static const std::vector<std::string> f = {"item", "kept", "in", "careful", "records",
                                               "of",   "some", "old", "archive", "shelf"};
    return f;
}

inline const char* synth_marker(int attribute) {
    return attribute == 1 ? "luminous" : "opaque";
}

inline SynthEntity make_entity(const std::string& id, const std::string& surface, int attribute,
                               const SynthSpec& spec, RngStream& rng) {
    SynthEntity e;
    e.id = id;
    e.surface = surface;
    e.attribute = attribute;
    const auto& defs = synth_def_fillers();
    const std::string marker = synth_marker(attribute);
    // Definition column of the dictionary row; the store prepends
    // "<surface> :" when it builds description token lists.
    e.definition = marker + " " + marker + " " + marker + " " +
                   defs[rng.uniform_int(defs.size())] + " " + defs[rng.uniform_int(defs.size())];
    e.embedding.resize(static_cast<std::size_t>(spec.embed_dim));
    const double sign = attribute == 1 ? 1.0 : -1.0;
    for (int d = 0; d < spec.embed_dim; ++d) {
        if (d < spec.attribute_dims)
            e.embedding[static_cast<std::size_t>(d)] = sign + 0.05 * rng.normal();
        else
            e.embedding[static_cast<std::size_t>(d)] = 0.3 * rng.normal();
    }
    return e;
}

// One sentence: focus surface at token 0, distractor surfaces at distinct
// later positions, fillers everywhere else. Every mention gets a span.
inline AnnotatedRecord make_sentence(const std::vector<SynthEntity>& pool, int pool_begin,
                                     int pool_end, int focus_index, const SynthSpec& spec,
                                     RngStream& rng) {
    const auto& fillers = synth_fillers();
    const SynthEntity& focus = pool[static_cast<std::size_t>(focus_index)];

    const int n_distract = rng.uniform_int(static_cast<std::size_t>(spec.max_distractors + 1));
    std::vector<int> mention_pos(static_cast<std::size_t>(spec.sentence_length), -1);
    mention_pos[0] = focus_index;
    std::vector<int> slots;
    for (int t = 2; t < spec.sentence_length; ++t) slots.push_back(t); // keep token 1 filler
    rng.shuffle(slots);
    for (int k = 0; k < n_distract; ++k) {
        int other = pool_begin + static_cast<int>(rng.uniform_int(
                                     static_cast<std::size_t>(pool_end - pool_begin)));
        mention_pos[static_cast<std::size_t>(slots[static_cast<std::size_t>(k)])] = other;
    }

    AnnotatedRecord rec;
    for (int t = 0; t < spec.sentence_length; ++t) {
        const int who = mention_pos[static_cast<std::size_t>(t)];
        if (who >= 0) {
            const auto& e = pool[static_cast<std::size_t>(who)];
            rec.seq.tokens.push_back(e.surface);
            rec.seq.pos_tags.push_back("NOUN");
            EntitySpan span;
            span.p = t;
            span.q = t;
            span.entity_id = e.id;
            span.surface = e.surface;
            span.from_linker = false;
            rec.seq.spans.push_back(span);
        } else {
            const auto& f = fillers[rng.uniform_int(fillers.size())];
            rec.seq.tokens.push_back(f.first);
            rec.seq.pos_tags.push_back(f.second);
        }
    }
    for (std::size_t t = 0; t < rec.seq.tokens.size(); ++t) {
        rec.text += rec.seq.tokens[t];
        if (t + 1 < rec.seq.tokens.size()) rec.text += " ";
    }
    rec.label.kind = Label::Kind::number;
    rec.label.number = focus.attribute;
    return rec;
}

inline void make_split(std::vector<AnnotatedRecord>& out, const std::vector<SynthEntity>& pool,
                       int pool_begin, int pool_end, int n_sentences, const SynthSpec& spec,
                       RngStream& rng) {
    const int half_pool = (pool_end - pool_begin) / 2; // attribute-1 entities come first
    for (int i = 0; i < n_sentences; ++i) {
        const int want = i % 2; // exactly balanced labels
        int focus;
        if (want == 1)
            focus = pool_begin + static_cast<int>(rng.uniform_int(static_cast<std::size_t>(half_pool)));
        else
            focus = pool_begin + half_pool +
                    static_cast<int>(rng.uniform_int(static_cast<std::size_t>(half_pool)));
        out.push_back(make_sentence(pool, pool_begin, pool_end, focus, spec, rng));
    }
}

} // namespace detail

inline SynthData generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    SynthData data;
    data.n_train_entities = spec.train_entities;

    RngStream ent_rng(spec.seed, "synth/entities");
    // Train pool: ids syn_t*, attribute 1 for the first half of the pool.
    for (int i = 0; i < spec.train_entities; ++i) {
        const int attr = i < spec.train_entities / 2 ? 1 : 0;
        data.entities.push_back(detail::make_entity(
            "syn_t" + std::to_string(i), "trontal" + std::to_string(i), attr, spec, ent_rng));
    }
    for (int i = 0; i < spec.dev_entities; ++i) {
        const int attr = i < spec.dev_entities / 2 ? 1 : 0;
        data.entities.push_back(detail::make_entity(
            "syn_d" + std::to_string(i), "develin" + std::to_string(i), attr, spec, ent_rng));
    }
    for (const auto& e : data.entities) data.attribute_of[e.id] = e.attribute;

    RngStream train_rng(spec.seed, "synth/train");
    RngStream dev_rng(spec.seed, "synth/dev");
    detail::make_split(data.train, data.entities, 0, spec.train_entities, spec.train_sentences,
                       spec, train_rng);
    detail::make_split(data.dev, data.entities, spec.train_entities,
                       spec.train_entities + spec.dev_entities, spec.dev_sentences, spec, dev_rng);
    return data;
}

namespace detail {

inline void write_records(const std::vector<AnnotatedRecord>& records, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("synth: cannot write: " + path);
    for (const auto& rec : records) {
        nlohmann::json j;
        j["text"] = rec.text;
        j["tokens"] = rec.seq.tokens;
        j["pos"] = rec.seq.pos_tags;
        auto spans = nlohmann::json::array();
        for (const auto& s : rec.seq.spans) {
            nlohmann::json sj;
            sj["start"] = s.p;
            sj["end"] = s.q;
            sj["entity_id"] = s.entity_id;
            sj["source"] = s.from_linker ? "linker" : "pos";
            spans.push_back(sj);
        }
        j["spans"] = spans;
        if (rec.label.kind == Label::Kind::number)
            j["label"] = rec.label.number;
        else if (rec.label.kind == Label::Kind::text)
            j["label"] = rec.label.text;
        else
            j["label"] = rec.label.tags;
        os << j.dump() << "\n";
    }
}

} // namespace detail

// Writes train.jsonl, dev.jsonl, dictionary.tsv, and embeddings.txt under
// `dir` (which must already exist).
inline void write_synthetic(const SynthData& data, const std::string& dir) {
    detail::write_records(data.train, dir + "/train.jsonl");
    detail::write_records(data.dev, dir + "/dev.jsonl");
    std::vector<std::tuple<std::string, std::string, std::string>> rows;
    std::vector<std::pair<std::string, std::vector<double>>> embeds;
    for (const auto& e : data.entities) {
        rows.emplace_back(e.id, e.surface, e.definition);
        embeds.emplace_back(e.id, e.embedding);
    }
    write_dictionary(dir + "/dictionary.tsv", rows);
    write_embeddings(dir + "/embeddings.txt", embeds);
}

// Builds a vocabulary over the corpus sentences plus every description
// line, so nothing the methods read at train time falls to UNK.
inline Vocabulary synth_vocabulary(const std::string& dir) {
    std::vector<std::string> lines;
    for (const char* split : {"train", "dev"})
        for (const auto& rec : load_annotations(dir + "/" + split + ".jsonl"))
            lines.push_back(rec.text);
    std::ifstream is(dir + "/dictionary.tsv");
    if (!is) throw std::runtime_error("synth: cannot open: " + dir + "/dictionary.tsv");
    std::string line;
    while (std::getline(is, line)) {
        for (auto& c : line)
            if (c == '\t') c = ' ';
        const auto first_space = line.find(' ');
        if (first_space != std::string::npos)
            lines.push_back(line.substr(first_space + 1) + " :"); // surface + definition + colon
    }
    return build_vocab(lines, 1);
}

// Reloads the written corpus and re-checks the defining properties: every
// span resolves in the dictionary and embedding table, each label equals
// the attribute spelled by the focus entity's definition marker and by the
// sign of its embedding attribute block, labels are balanced, and the two
// splits draw from disjoint entity pools. Throws on any violation.
inline void audit_synthetic(const std::string& dir) {
    const auto vocab = synth_vocabulary(dir);
    KnowledgeStore store;
    store.read_dictionary(dir + "/dictionary.tsv", vocab);
    store.read_embeddings(dir + "/embeddings.txt");
    std::set<std::string> train_pool, dev_pool;
    for (const char* split : {"train", "dev"}) {
        const auto records = load_annotations(dir + "/" + split + ".jsonl");
        auto& pool = std::string(split) == std::string("train") ? train_pool : dev_pool;
        std::size_t ones = 0;
        for (const auto& rec : records) {
            if (rec.seq.spans.empty() || rec.seq.spans.front().p != 0)
                throw std::runtime_error("synth audit: sentence without a leading focus span");
            for (const auto& span : rec.seq.spans) {
                pool.insert(span.entity_id);
                const auto hit = store.lookup(span.entity_id);
                if (!hit.description)
                    throw std::runtime_error("synth audit: no definition for " + span.entity_id);
                if (!hit.embedding)
                    throw std::runtime_error("synth audit: no embedding for " + span.entity_id);
            }
            const auto& focus = rec.seq.spans.front().entity_id;
            const auto hit = store.lookup(focus);
            // Description tokens are "<surface> : <marker> …".
            const auto& marker = hit.description->tokens.at(2);
            int attr;
            if (marker == detail::synth_marker(1))
                attr = 1;
            else if (marker == detail::synth_marker(0))
                attr = 0;
            else
                throw std::runtime_error("synth audit: definition of " + focus + " has no marker");
            if (rec.label.kind != Label::Kind::number ||
                rec.label.number != static_cast<double>(attr))
                throw std::runtime_error("synth audit: label disagrees with definition of " + focus);
            if ((hit.embedding->at(0) > 0) != (attr == 1))
                throw std::runtime_error("synth audit: label disagrees with embedding of " + focus);
            ones += attr;
        }
        if (ones * 2 != records.size())
            throw std::runtime_error(std::string("synth audit: unbalanced labels in ") + split);
    }
    for (const auto& id : dev_pool)
        if (train_pool.count(id))
            throw std::runtime_error("synth audit: entity " + id + " appears in both splits");
}

} // namespace knit
