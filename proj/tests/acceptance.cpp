// End-to-end acceptance checks. Each criterion prints one [PASS]/[FAIL]
// line; the exit code is the number of failures. Oracles are independent
// re-implementations (per-pair mask scan, confusion counts, long-double
// statistics) rather than calls back into the code under test.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "knit/assemble.hpp"
#include "knit/diffmask.hpp"
#include "knit/gradcheck.hpp"
#include "knit/metrics.hpp"
#include "knit/plan.hpp"
#include "knit/probes.hpp"
#include "knit/synth.hpp"
#include "knit/train.hpp"

namespace fs = std::filesystem;
using namespace knit;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& why) {
    if (!ok) throw std::runtime_error(why);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename F>
void criterion(int n, const char* name, F fn) {
    try {
        const std::string note = fn();
        std::printf("[PASS] criterion %d: %s (%s)\n", n, name, note.c_str());
    } catch (const std::exception& e) {
        ++g_failures;
        std::printf("[FAIL] criterion %d: %s (%s)\n", n, name, e.what());
    }
    std::fflush(stdout);
}

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof buf, pattern, args);
    va_end(args);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    check(is.good(), "cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
    check(os.good(), "cannot write " + p.string());
}

// ---------------------------------------------------------------------------
// Hand-built corpus of candidate entities for the randomized structural
// checks: a small word pool, six described entities (with graph vectors),
// and three "ghost" ids that resolve to nothing.

struct RandKit {
    Vocabulary vocab;
    KnowledgeStore store;
    std::vector<std::string> pool;
};

RandKit make_randkit(const fs::path& dir) {
    fs::create_directories(dir);
    RandKit kit;
    for (int i = 0; i < 30; ++i) kit.pool.push_back("w" + std::to_string(i));

    std::mt19937_64 rng(99);
    std::ostringstream dict, emb;
    for (int e = 0; e < 6; ++e) {
        const int len = 1 + static_cast<int>(rng() % 8);
        dict << "e" << e << "\tent" << e << "\t";
        for (int t = 0; t < len; ++t)
            dict << (t ? " " : "") << kit.pool[rng() % kit.pool.size()];
        dict << "\n";
        emb << "e" << e;
        for (int d = 0; d < 8; ++d)
            emb << " " << (static_cast<double>(rng() % 2001) / 1000.0 - 1.0);
        emb << "\n";
    }
    spit(dir / "dictionary.tsv", dict.str());
    spit(dir / "embeddings.txt", emb.str());

    std::vector<std::string> lines{":"};
    for (const auto& w : kit.pool) lines.push_back(w);
    for (int e = 0; e < 6; ++e) lines.push_back("ent" + std::to_string(e));
    kit.vocab = build_vocab(lines, 1);
    kit.store.read_dictionary((dir / "dictionary.tsv").string(), kit.vocab);
    kit.store.read_embeddings((dir / "embeddings.txt").string());
    return kit;
}

// Random sentence with single-token entity spans at distinct positions.
TokenSequence random_seq(std::mt19937_64& rng, const RandKit& kit, int min_len, int max_len,
                         int max_spans, bool allow_ghost) {
    TokenSequence seq;
    const int L = min_len + static_cast<int>(rng() % static_cast<std::uint64_t>(max_len - min_len + 1));
    for (int t = 0; t < L; ++t) seq.tokens.push_back(kit.pool[rng() % kit.pool.size()]);
    seq.pos_tags.assign(seq.tokens.size(), "NOUN");
    const int want = static_cast<int>(rng() % static_cast<std::uint64_t>(max_spans + 1));
    std::set<int> at;
    while (static_cast<int>(at.size()) < std::min(want, L))
        at.insert(static_cast<int>(rng() % static_cast<std::uint64_t>(L)));
    for (const int p : at) {
        EntitySpan s;
        s.p = s.q = p;
        const bool ghost = allow_ghost && rng() % 10 < 3;
        s.entity_id = (ghost ? "g" : "e") + std::to_string(rng() % (ghost ? 3 : 6));
        s.surface = seq.tokens[static_cast<std::size_t>(p)];
        seq.spans.push_back(s);
    }
    seq.ids = kit.vocab.encode(seq.tokens);
    return seq;
}

AnnotatedRecord record_of(TokenSequence seq) {
    AnnotatedRecord rec;
    rec.seq = std::move(seq);
    rec.label.kind = Label::Kind::number;
    rec.label.number = 0.0;
    return rec;
}

RunConfig small_cfg(Method m, const RandKit& kit, int d_model, int ff) {
    RunConfig cfg;
    cfg.method = m;
    cfg.max_len = 64;
    cfg.head.kind = TaskHead::Kind::classification;
    cfg.head.classes = 2;
    cfg.enc.vocab_size = kit.vocab.size();
    cfg.enc.d_model = d_model;
    cfg.enc.layers = 2;
    cfg.enc.heads = 2;
    cfg.enc.ff = ff;
    cfg.enc.max_positions = 64;
    cfg.enc.dropout = 0.0;
    return cfg;
}

// ---------------------------------------------------------------------------
// Shared synthetic fixture: the full generated task (2,000 train / 500 dev,
// disjoint entity pools) plus the models retained for the analysis checks.

struct Fixture {
    fs::path dir;
    Vocabulary vocab;
    KnowledgeStore store;
    std::vector<AnnotatedRecord> train, dev;
};

Fixture make_fixture(const fs::path& dir) {
    fs::create_directories(dir);
    SynthSpec spec; // defaults: 2,000 train / 500 dev, disjoint entity pools
    write_synthetic(generate_synthetic(spec), dir.string());
    Fixture fx;
    fx.dir = dir;
    fx.vocab = synth_vocabulary(dir.string());
    fx.store.read_dictionary((dir / "dictionary.tsv").string(), fx.vocab);
    fx.store.read_embeddings((dir / "embeddings.txt").string());
    fx.train = load_annotations((dir / "train.jsonl").string(), &fx.vocab);
    fx.dev = load_annotations((dir / "dev.jsonl").string(), &fx.vocab);
    return fx;
}

RunConfig bench_cfg(Method m, const Fixture& fx, std::uint64_t seed) {
    RunConfig cfg;
    cfg.method = m;
    cfg.lr = 1e-3;
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.lambda_value = 0.2;
    cfg.seed = seed;
    cfg.max_len = 64;
    cfg.head.kind = TaskHead::Kind::classification;
    cfg.head.classes = 2;
    cfg.metric = MetricKind::accuracy;
    cfg.enc.vocab_size = fx.vocab.size();
    cfg.enc.d_model = 48;
    cfg.enc.layers = 3;
    cfg.enc.heads = 2;
    cfg.enc.ff = 96;
    cfg.enc.max_positions = 128;
    cfg.enc.dropout = 0.0;
    return cfg;
}

struct Retained {
    RunConfig cfg;
    FinetuneOutcome<float> out;
};

std::optional<Retained> g_baseline, g_kt_attn;

// Entity-disjoint probe split: group records by the focus entity (the span
// at sentence position 0) and alternate whole groups between fit and eval
// within each label class, so both sides see both labels but no entity
// crosses sides.
void split_by_focus(const std::vector<AnnotatedRecord>& dev, std::vector<AnnotatedRecord>& fit,
                    std::vector<AnnotatedRecord>& ev) {
    std::map<std::string, int> bucket;
    std::map<int, int> seen_per_label;
    for (const auto& rec : dev) {
        const std::string& id = rec.seq.spans.at(0).entity_id;
        const int label = static_cast<int>(rec.label.number);
        auto it = bucket.find(id);
        if (it == bucket.end()) it = bucket.emplace(id, seen_per_label[label]++ % 2).first;
        (it->second == 0 ? fit : ev).push_back(rec);
    }
}

// ---------------------------------------------------------------------------
// criterion 1: per-pair brute force over the assembled segments

std::string run_mask_oracle(const RandKit& kit) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    long pairs = 0, with_segments = 0, dropped = 0, unresolved = 0;
    for (int i = 0; i < 1000; ++i) {
        auto seq = random_seq(rng, kit, 1, 20, 4, true);
        // the visibility mask is defined for the append layout only (the
        // masked-attention method rejects insert-after at config time)
        const auto inp = assemble(seq, kit.store, Layout::append, 64);
        const auto mask = build_visibility_mask(inp);
        check(mask.T == inp.length(), "mask dimension differs from the input length");
        if (!inp.segments.empty()) ++with_segments;
        dropped += inp.dropped_descriptions;
        unresolved += static_cast<long>(inp.unresolved_entities.size());

        auto seg_of = [&inp](int t) {
            for (std::size_t s = 0; s < inp.segments.size(); ++s)
                if (t >= inp.segments[s].begin && t < inp.segments[s].end)
                    return static_cast<int>(s);
            return -1;
        };
        for (int j = 0; j < mask.T; ++j)
            for (int k = 0; k < mask.T; ++k) {
                const int sj = seg_of(j), sk = seg_of(k);
                const bool visible = (sj < 0 && sk < 0) || (sj >= 0 && sj == sk) ||
                                     (sj < 0 && sk >= 0 &&
                                      inp.segments[static_cast<std::size_t>(sk)].anchor == j);
                if (mask.at(j, k) != visible)
                    throw std::runtime_error(fmt("instance %d entry (%d,%d): mask %d oracle %d",
                                                 i, j, k, mask.at(j, k) ? 1 : 0, visible ? 1 : 0));
                ++pairs;
            }
    }
    const double el = seconds_since(t0);
    check(el < 30.0, fmt("runtime %.1fs exceeds 30s", el));
    return fmt("1000 instances, %ld pairs, %ld with segments, %ld dropped, %ld unresolved, %.1fs",
               pairs, with_segments, dropped, unresolved, el);
}

// ---------------------------------------------------------------------------
// criterion 2: masked-attention forward leaves non-anchor rows of the base
// region untouched at the first layer

template <typename S>
double locality_worst(const RandKit& kit, int draws, std::uint64_t base_seed) {
    std::mt19937_64 rng(base_seed);
    const LabelCodec codec;
    double worst = 0.0;
    for (int i = 0; i < draws; ++i) {
        auto seq = random_seq(rng, kit, 2, 20, 3, false);
        if (seq.spans.empty()) {
            EntitySpan s;
            s.p = s.q = 0;
            s.entity_id = "e0";
            s.surface = seq.tokens[0];
            seq.spans.push_back(s);
        }
        const auto rec = record_of(std::move(seq));
        auto cfg_m = small_cfg(Method::kt_attn, kit, 16, 32);
        auto cfg_b = small_cfg(Method::baseline, kit, 16, 32);
        ParamStore<S> ps;
        init_encoder_params(ps, cfg_m.enc, 1000 + static_cast<std::uint64_t>(i));
        const auto exm = prepare_example(rec, cfg_m, kit.store, codec);
        const auto exb = prepare_example(rec, cfg_b, kit.store, codec);
        Graph<S> g;
        const auto om = method_forward(g, ps, cfg_m, exm, 0.0, false, nullptr);
        const auto ob = method_forward(g, ps, cfg_b, exb, 0.0, false, nullptr);
        std::set<int> anchors;
        for (const auto& s : exm.inp.segments) anchors.insert(s.anchor);
        const auto& tm = g.val(om.acts.at(1));
        const auto& tb = g.val(ob.acts.at(1));
        for (int r = 0; r < exb.inp.length(); ++r) {
            if (anchors.count(r)) continue;
            for (int c = 0; c < tb.cols(); ++c)
                worst = std::max(worst, std::abs(static_cast<double>(tm.at(r, c)) -
                                                 static_cast<double>(tb.at(r, c))));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// criterion 3: alpha = 0 embedding injection is a bit-level no-op

template <typename S>
void identity_draws(const RandKit& kit, Method m, int draws, std::uint64_t base_seed) {
    std::mt19937_64 rng(base_seed);
    const LabelCodec codec;
    for (int i = 0; i < draws; ++i) {
        auto seq = random_seq(rng, kit, 1, 20, 3, false);
        if (seq.spans.empty()) {
            EntitySpan s;
            s.p = s.q = 0;
            s.entity_id = "e1";
            s.surface = seq.tokens[0];
            seq.spans.push_back(s);
        }
        const auto rec = record_of(std::move(seq));
        auto cfg_m = small_cfg(m, kit, 16, 32);
        auto cfg_b = small_cfg(Method::baseline, kit, 16, 32);
        ParamStore<S> ps;
        init_encoder_params(ps, cfg_m.enc, 2000 + static_cast<std::uint64_t>(i));
        init_projection_params(
            ps, m == Method::kg_emb ? kit.store.embedding_dim() : cfg_m.enc.d_model, cfg_m.enc,
            2000 + static_cast<std::uint64_t>(i));
        init_head_params(ps, cfg_m.enc, cfg_m.head, 2000 + static_cast<std::uint64_t>(i));
        const auto exm = prepare_example(rec, cfg_m, kit.store, codec);
        const auto exb = prepare_example(rec, cfg_b, kit.store, codec);
        check(!exm.anchors.empty(), "draw resolved no anchors");
        Graph<S> g;
        const auto om = method_forward(g, ps, cfg_m, exm, 0.0, false, nullptr);
        const auto ob = method_forward(g, ps, cfg_b, exb, 0.0, false, nullptr);
        check(om.acts.size() == ob.acts.size(), "activation stack sizes differ");
        auto same_bits = [&g](typename Graph<S>::NodeId a, typename Graph<S>::NodeId b) {
            const auto& ta = g.val(a);
            const auto& tb = g.val(b);
            return ta.v.size() == tb.v.size() &&
                   std::memcmp(ta.v.data(), tb.v.data(), ta.v.size() * sizeof(S)) == 0;
        };
        for (std::size_t l = 0; l < om.acts.size(); ++l)
            check(same_bits(om.acts[l], ob.acts[l]),
                  fmt("%s draw %d: level %zu differs bitwise", method_name(m).c_str(), i, l));
        check(same_bits(om.normed_top, ob.normed_top),
              fmt("%s draw %d: top norm differs bitwise", method_name(m).c_str(), i));
    }
}

// ---------------------------------------------------------------------------
// criterion 9 oracles

struct OracleSpans {
    std::vector<std::tuple<int, int, std::string>> spans;
};

OracleSpans oracle_decode(const std::vector<std::string>& tags) {
    OracleSpans out;
    int start = -1;
    std::string type;
    auto flush = [&](int end) {
        if (start >= 0) out.spans.emplace_back(start, end, type);
        start = -1;
    };
    for (int i = 0; i < static_cast<int>(tags.size()); ++i) {
        const auto& t = tags[static_cast<std::size_t>(i)];
        if (t == "O") {
            flush(i - 1);
        } else if (t[0] == 'B') {
            flush(i - 1);
            start = i;
            type = t.substr(2);
        } else { // I-: continue an open span of the same type, else open anew
            const std::string ty = t.substr(2);
            if (!(start >= 0 && type == ty)) {
                flush(i - 1);
                start = i;
                type = ty;
            }
        }
    }
    flush(static_cast<int>(tags.size()) - 1);
    return out;
}

} // namespace

int main() {
    const fs::path root = fs::temp_directory_path() / "knit_acceptance";
    std::error_code ec;
    fs::remove_all(root, ec);
    fs::create_directories(root);

    const auto kit = make_randkit(root / "randkit");
    std::optional<Fixture> fixture;
    try {
        fixture = make_fixture(root / "corpus");
    } catch (const std::exception& e) {
        std::printf("fixture generation failed: %s\n", e.what());
    }

    criterion(1, "visibility mask equals a per-pair brute force", [&] {
        return run_mask_oracle(kit);
    });

    criterion(2, "masked attention is local at the first layer", [&] {
        const auto t0 = std::chrono::steady_clock::now();
        const double w32 = locality_worst<float>(kit, 100, 3100);
        check(w32 <= 1e-6, fmt("32-bit worst diff %.3g exceeds 1e-6", w32));
        const double w64 = locality_worst<double>(kit, 100, 3200);
        check(w64 <= 1e-12, fmt("64-bit worst diff %.3g exceeds 1e-12", w64));
        const double el = seconds_since(t0);
        check(el < 60.0, fmt("runtime %.1fs exceeds 1 min", el));
        return fmt("100 draws each: worst 32-bit %.2g, 64-bit %.2g, %.1fs", w32, w64, el);
    });

    criterion(3, "zero-weight injection is bit-identical to the plain forward", [&] {
        identity_draws<float>(kit, Method::kt_emb, 100, 4100);
        identity_draws<float>(kit, Method::kg_emb, 100, 4200);
        identity_draws<double>(kit, Method::kt_emb, 100, 4300);
        identity_draws<double>(kit, Method::kg_emb, 100, 4400);
        return "100 draws per method per precision, all levels bitwise equal";
    });

    criterion(4, "annealing trace is exactly linear from 0 to lambda", [&] {
        check(fixture.has_value(), "synthetic fixture unavailable");
        const std::vector<AnnotatedRecord> sub(fixture->train.begin(), fixture->train.begin() + 48);
        const std::vector<AnnotatedRecord> dsub(fixture->dev.begin(), fixture->dev.begin() + 16);
        const std::vector<std::pair<Method, double>> runs = {{Method::kt_emb, 0.1},
                                                             {Method::kt_emb, 0.2},
                                                             {Method::kt_emb, 0.3},
                                                             {Method::kg_emb, 0.2}};
        for (const auto& [m, lambda] : runs) {
            RunConfig cfg = small_cfg(m, kit, 16, 32);
            cfg.enc.vocab_size = fixture->vocab.size();
            cfg.enc.max_positions = 128;
            cfg.lr = 1e-3;
            cfg.epochs = 3;
            cfg.batch_size = 8;
            cfg.lambda_value = lambda;
            cfg.seed = 5;
            const auto out = finetune<float>(cfg, sub, dsub, fixture->store);
            const auto& trace = out.report.alpha_trace;
            const long T = 3 * ((48 + 7) / 8);
            check(static_cast<long>(trace.size()) == T + 1,
                  fmt("%s trace length %zu, expected %ld", method_name(m).c_str(), trace.size(),
                      T + 1));
            check(trace.front() == 0.0, "trace does not start at exactly 0");
            for (long t = 0; t <= T; ++t)
                check(trace[static_cast<std::size_t>(t)] ==
                          lambda * static_cast<double>(t) / static_cast<double>(T),
                      fmt("%s lambda %.1f step %ld: trace deviates from linearity",
                          method_name(m).c_str(), lambda, t));
            check(std::abs(trace.back() - lambda) <= 1e-12 * lambda,
                  fmt("endpoint %.17g not within rounding of lambda %.1f", trace.back(), lambda));
        }
        return "lambda in {0.1,0.2,0.3} plus the graph-vector method, 19-entry traces all linear";
    });

    criterion(5, "analytic gradients match numeric ones on every method path", [&] {
        const auto t0 = std::chrono::steady_clock::now();
        TokenSequence seq;
        seq.tokens = {"w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8"};
        seq.pos_tags.assign(8, "NOUN");
        for (const auto& [p, id] : std::vector<std::pair<int, const char*>>{{1, "e0"}, {4, "e1"}}) {
            EntitySpan s;
            s.p = s.q = p;
            s.entity_id = id;
            s.surface = seq.tokens[static_cast<std::size_t>(p)];
            seq.spans.push_back(s);
        }
        seq.ids = kit.vocab.encode(seq.tokens);
        const auto rec = record_of(std::move(seq));
        const LabelCodec codec;

        std::string notes;
        for (const Method m : {Method::baseline, Method::kt, Method::kt_attn, Method::kt_emb,
                               Method::kg_emb}) {
            RunConfig cfg = small_cfg(m, kit, 8, 16);
            cfg.stop_gradient_descriptions = false;
            const auto ex = prepare_example(rec, cfg, kit.store, codec);
            auto setup = [&](auto& ps) {
                using T = std::decay_t<decltype(ps.at(0).value.v[0])>;
                init_encoder_params(ps, cfg.enc, 10);
                if (method_injects(cfg.method)) {
                    init_projection_params(
                        ps, cfg.method == Method::kg_emb ? kit.store.embedding_dim()
                                                         : cfg.enc.d_model,
                        cfg.enc, 10);
                    // the final projection affine starts at exactly zero; move it
                    // off that point so its whole path carries gradient
                    auto& w2 = ps.get("proj/w2").value;
                    for (std::size_t k = 0; k < w2.v.size(); ++k)
                        w2.v[k] = static_cast<T>(0.02 * (static_cast<double>(k % 7) - 3.0));
                }
                init_head_params(ps, cfg.enc, cfg.head, 10);
            };
            auto build = [&](auto& g, auto& ps) {
                const auto out = forward_example(g, ps, cfg, ex, 0.15, false, nullptr);
                return example_loss(g, out, cfg, ex);
            };
            const auto r32 = gradient_check<float>(setup, build, 3);
            check(r32.checked > 400, fmt("%s: only %zu coordinates checked",
                                         method_name(m).c_str(), r32.checked));
            check(r32.within(1e-3), fmt("%s 32-bit: rel err %.3g at %s", method_name(m).c_str(),
                                        r32.max_rel_err, r32.worst_param.c_str()));
            const auto r64 = gradient_check<double>(setup, build, 3);
            check(r64.within(1e-6), fmt("%s 64-bit: rel err %.3g at %s", method_name(m).c_str(),
                                        r64.max_rel_err, r64.worst_param.c_str()));
            notes += fmt("%s%s %.1g/%.1g", notes.empty() ? "" : ", ", method_name(m).c_str(),
                         r32.max_rel_err, r64.max_rel_err);
        }
        const double el = seconds_since(t0);
        check(el < 120.0, fmt("runtime %.1fs exceeds 2 min", el));
        return notes + fmt(", %.1fs", el);
    });

    criterion(6, "knowledge closes the generalization gap on the synthetic task", [&] {
        check(fixture.has_value(), "synthetic fixture unavailable");
        const auto t0 = std::chrono::steady_clock::now();
        std::string notes;
        for (const Method m : {Method::baseline, Method::kt, Method::kt_attn, Method::kt_emb,
                               Method::kg_emb}) {
            std::vector<FinetuneOutcome<float>> outs;
            std::vector<double> metrics;
            std::vector<RunConfig> cfgs;
            for (std::uint64_t seed = 11; seed <= 15; ++seed) {
                cfgs.push_back(bench_cfg(m, *fixture, seed));
                outs.push_back(finetune<float>(cfgs.back(), fixture->train, fixture->dev,
                                               fixture->store));
                metrics.push_back(outs.back().report.dev_metric);
            }
            const double med = median_of_five(metrics);
            if (m == Method::baseline)
                check(med <= 0.60, fmt("baseline median %.4f exceeds 0.60", med));
            else
                check(med >= 0.90, fmt("%s median %.4f below 0.90", method_name(m).c_str(), med));
            if (m == Method::baseline || m == Method::kt_attn) {
                for (std::size_t i = 0; i < outs.size(); ++i)
                    if (outs[i].report.dev_metric == med) {
                        auto& slot = m == Method::baseline ? g_baseline : g_kt_attn;
                        slot.emplace(Retained{cfgs[i], std::move(outs[i])});
                        break;
                    }
            }
            notes += fmt("%s%s %.3f", notes.empty() ? "" : ", ", method_name(m).c_str(), med);
        }
        const double el = seconds_since(t0);
        check(el <= 900.0, fmt("runtime %.0fs exceeds 15 min", el));
        return notes + fmt(", %.0fs", el);
    });

    criterion(7, "label probes gain accuracy at the top level, self-delta is zero", [&] {
        check(fixture.has_value(), "synthetic fixture unavailable");
        check(g_baseline && g_kt_attn, "retained models unavailable (criterion 6 failed?)");
        std::vector<AnnotatedRecord> fit, ev;
        split_by_focus(fixture->dev, fit, ev);
        std::set<std::string> fit_ids, ev_ids;
        for (const auto& r : fit) fit_ids.insert(r.seq.spans.at(0).entity_id);
        for (const auto& r : ev) ev_ids.insert(r.seq.spans.at(0).entity_id);
        for (const auto& id : fit_ids)
            check(!ev_ids.count(id), "probe split shares entity " + id);

        auto& base = *g_baseline;
        auto& attn = *g_kt_attn;
        const auto fit_b = prepare_examples(fit, base.cfg, fixture->store, base.out.codec);
        const auto ev_b = prepare_examples(ev, base.cfg, fixture->store, base.out.codec);
        const auto fit_a = prepare_examples(fit, attn.cfg, fixture->store, attn.out.codec);
        const auto ev_a = prepare_examples(ev, attn.cfg, fixture->store, attn.out.codec);
        const auto rep_b = probe_report(base.out.params, base.cfg, fit_b, ev_b);
        const auto rep_b2 = probe_report(base.out.params, base.cfg, fit_b, ev_b);
        const auto rep_a = probe_report(attn.out.params, attn.cfg, fit_a, ev_a);

        const auto self = delta_mi(rep_b2, rep_b);
        for (std::size_t l = 0; l < self.dy.size(); ++l) {
            check(self.dy[l] == 0.0, fmt("self-delta dy %.3g at level %zu", self.dy[l], l));
            check(self.dx[l] == 0.0, fmt("self-delta dx %.3g at level %zu", self.dx[l], l));
        }
        const auto d = delta_mi(rep_a, rep_b);
        check(d.dy.back() >= 0.05,
              fmt("top-level probe accuracy gain %.4f below +0.05", d.dy.back()));
        return fmt("fit %zu / eval %zu by entity; top-level gain %+.3f (%.3f vs %.3f)", fit.size(),
                   ev.size(), d.dy.back(), rep_a.y_acc.back(), rep_b.y_acc.back());
    });

    criterion(8, "trained gates stay faithful while masking the inputs", [&] {
        check(fixture.has_value(), "synthetic fixture unavailable");
        check(g_kt_attn.has_value(), "retained model unavailable (criterion 6 failed?)");
        auto& attn = *g_kt_attn;
        const auto dev_ex = prepare_examples(fixture->dev, attn.cfg, fixture->store,
                                             attn.out.codec);
        const std::vector<PreparedExample> gate_fit(dev_ex.begin(), dev_ex.begin() + 150);
        const std::vector<PreparedExample> held(dev_ex.begin() + 150, dev_ex.end());
        const auto sum_before = attn.out.params.checksum();
        auto stack = train_gates(attn.out.params, attn.cfg, gate_fit);
        double div_sum = 0.0, mask_sum = 0.0;
        for (const auto& ex : held) {
            const auto hm = compute_heatmap(stack, attn.out.params, attn.cfg, ex);
            div_sum += hm.divergence;
            mask_sum += masked_fraction(hm, 0.5);
            for (std::size_t j = 0; j < hm.tokens.size(); ++j)
                for (std::size_t l = 1; l < hm.z.size(); ++l)
                    check(hm.z[l][j] <= hm.z[l - 1][j] + 1e-12,
                          fmt("level %zu token %zu: gate rises down the stack", l, j));
        }
        const double mean_div = div_sum / static_cast<double>(held.size());
        const double mean_mask = mask_sum / static_cast<double>(held.size());
        check(mean_div <= 0.05, fmt("held-out mean divergence %.4f exceeds 0.05", mean_div));
        check(mean_mask >= 0.20, fmt("top-level masked fraction %.3f below 0.20", mean_mask));
        check(attn.out.params.checksum() == sum_before, "frozen model parameters changed");
        return fmt("held-out %zu: divergence %.5f, masked %.2f, monotone, checksum intact",
                   held.size(), mean_div, mean_mask);
    });

    criterion(9, "metrics match worked examples and a confusion-matrix oracle", [&] {
        auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };

        const auto perfect = metric_matthews({0, 1, 1, 0}, {0, 1, 1, 0});
        check(near(perfect.value, 1.0) && !perfect.degenerate, "perfect correlation not 1.0");
        // TP=3 FP=1 FN=2 TN=4
        const std::vector<int> mp = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
        const std::vector<int> mg = {1, 1, 1, 0, 1, 1, 0, 0, 0, 0};
        const auto mcc = metric_matthews(mp, mg);
        check(near(mcc.value, 10.0 / std::sqrt(600.0)),
              fmt("confusion example: %.12f vs %.12f", mcc.value, 10.0 / std::sqrt(600.0)));
        const auto deg = metric_matthews({1, 0}, {1, 1});
        check(deg.degenerate && deg.value == 0.0, "zero denominator not flagged");

        const auto acc = metric_accuracy({1, 0, 1, 1}, {1, 1, 1, 0});
        check(near(acc.value, 0.5), "accuracy hand example");

        const auto pear = metric_pearson({1, 2, 3, 4}, {1, 3, 2, 4});
        check(near(pear.value, 0.8) && !pear.degenerate, "correlation hand example");
        const auto pdeg = metric_pearson({2, 2, 2}, {1, 2, 3});
        check(pdeg.degenerate && pdeg.value == 0.0, "constant predictions not flagged");

        const auto f1 = metric_span_f1({{"O", "B-PER", "I-PER", "O", "B-LOC"}},
                                       {{"O", "B-PER", "I-PER", "O", "O"}});
        check(near(f1.value, 2.0 / 3.0), fmt("span example: %.12f", f1.value));
        const auto lenient = metric_span_f1({{"I-PER", "I-PER", "O", "I-LOC"}},
                                            {{"B-PER", "I-PER", "O", "B-LOC"}});
        check(near(lenient.value, 1.0), "lenient continuation decode");
        const auto vacuous = metric_span_f1({{"O", "O"}}, {{"O", "O"}});
        check(near(vacuous.value, 1.0) && !vacuous.degenerate, "no spans on either side");

        std::mt19937_64 rng(4242);
        for (int i = 0; i < 1000; ++i) {
            const int n = 1 + static_cast<int>(rng() % 40);
            std::vector<int> pred, gold;
            for (int k = 0; k < n; ++k) {
                pred.push_back(static_cast<int>(rng() % 2));
                gold.push_back(static_cast<int>(rng() % 2));
            }
            long tp = 0, fp = 0, fn = 0, tn = 0;
            for (int k = 0; k < n; ++k) {
                if (pred[static_cast<std::size_t>(k)] == 1)
                    (gold[static_cast<std::size_t>(k)] == 1 ? tp : fp)++;
                else
                    (gold[static_cast<std::size_t>(k)] == 1 ? fn : tn)++;
            }
            const auto a = metric_accuracy(pred, gold);
            check(near(a.value, static_cast<double>(tp + tn) / n), "accuracy oracle mismatch");
            const auto mm = metric_matthews(pred, gold);
            const long double denom = static_cast<long double>(tp + fp) * (tp + fn) * (tn + fp) *
                                      (tn + fn);
            if (denom == 0) {
                check(mm.degenerate && mm.value == 0.0, "matthews degeneracy oracle mismatch");
            } else {
                const long double want =
                    (static_cast<long double>(tp) * tn - static_cast<long double>(fp) * fn) /
                    std::sqrt(denom);
                check(!mm.degenerate && near(mm.value, static_cast<double>(want)),
                      fmt("matthews oracle mismatch at %d", i));
            }
        }
        for (int i = 0; i < 1000; ++i) {
            const int n = 2 + static_cast<int>(rng() % 40);
            std::vector<double> pred, gold;
            const bool flat = i % 97 == 0;
            for (int k = 0; k < n; ++k) {
                pred.push_back(flat ? 0.5
                                    : static_cast<double>(rng() % 2001) / 1000.0 - 1.0);
                gold.push_back(static_cast<double>(rng() % 2001) / 1000.0 - 1.0);
            }
            long double sx = 0, sy = 0;
            for (int k = 0; k < n; ++k) {
                sx += pred[static_cast<std::size_t>(k)];
                sy += gold[static_cast<std::size_t>(k)];
            }
            const long double mx = sx / n, my = sy / n;
            long double sxx = 0, syy = 0, sxy = 0;
            for (int k = 0; k < n; ++k) {
                const long double dx = pred[static_cast<std::size_t>(k)] - mx;
                const long double dy = gold[static_cast<std::size_t>(k)] - my;
                sxx += dx * dx;
                syy += dy * dy;
                sxy += dx * dy;
            }
            const auto r = metric_pearson(pred, gold);
            if (sxx == 0 || syy == 0)
                check(r.degenerate && r.value == 0.0, "correlation degeneracy oracle mismatch");
            else
                check(!r.degenerate &&
                          near(r.value, static_cast<double>(sxy / std::sqrt(sxx * syy))),
                      fmt("correlation oracle mismatch at %d", i));
        }
        const std::vector<std::string> tagset = {"O",     "B-PER", "I-PER", "B-LOC",
                                                 "I-LOC", "B-ORG", "I-ORG"};
        for (int i = 0; i < 1000; ++i) {
            const int seqs = 1 + static_cast<int>(rng() % 4);
            std::vector<std::vector<std::string>> pred, gold;
            for (int s = 0; s < seqs; ++s) {
                const int n = 1 + static_cast<int>(rng() % 12);
                std::vector<std::string> pt, gt;
                for (int k = 0; k < n; ++k) {
                    const auto pick = [&] {
                        const std::uint64_t x = rng() % 10;
                        return tagset[x < 4 ? 0 : 1 + (x - 4) % 6];
                    };
                    pt.push_back(pick());
                    gt.push_back(pick());
                }
                pred.push_back(std::move(pt));
                gold.push_back(std::move(gt));
            }
            long tp = 0, np = 0, ng = 0;
            for (int s = 0; s < seqs; ++s) {
                auto ps = oracle_decode(pred[static_cast<std::size_t>(s)]).spans;
                auto gs = oracle_decode(gold[static_cast<std::size_t>(s)]).spans;
                np += static_cast<long>(ps.size());
                ng += static_cast<long>(gs.size());
                for (const auto& sp : ps) {
                    const auto it = std::find(gs.begin(), gs.end(), sp);
                    if (it != gs.end()) {
                        ++tp;
                        gs.erase(it);
                    }
                }
            }
            const auto f = metric_span_f1(pred, gold);
            if (np + ng == 0) {
                check(near(f.value, 1.0) && !f.degenerate, "empty-span oracle mismatch");
                continue;
            }
            const double p = np > 0 ? static_cast<double>(tp) / np : 0.0;
            const double rr = ng > 0 ? static_cast<double>(tp) / ng : 0.0;
            if (p + rr == 0.0)
                check(f.degenerate && f.value == 0.0, "zero-overlap oracle mismatch");
            else
                check(!f.degenerate && near(f.value, 2.0 * p * rr / (p + rr)),
                      fmt("span oracle mismatch at %d", i));
        }
        return "worked examples exact, 3000 randomized oracle comparisons agree";
    });

    criterion(10, "rerunning a plan reproduces the summary byte for byte", [&] {
        const auto dir = root / "determinism";
        fs::create_directories(dir);
        spit(dir / "synth.spec",
             "train = 24\ndev = 12\ntrain_entities = 8\ndev_entities = 4\n"
             "sentence_length = 8\nembed_dim = 8\nattribute_dims = 4\n"
             "max_distractors = 1\nseed = 3\n");
        cmd_gen_synth((dir / "synth.spec").string(), (dir / "corpus").string());
        auto plan_for = [&](const std::string& out) {
            return "task = classification\nclasses = 2\nmetric = accuracy\n"
                   "methods = baseline, kt-emb\nlrs = 2e-3\nlambdas = 0.2\n"
                   "seeds = 1,2,3,4,5\n"
                   "train = " + (dir / "corpus" / "train.jsonl").string() + "\n"
                   "dev = " + (dir / "corpus" / "dev.jsonl").string() + "\n"
                   "dictionary = " + (dir / "corpus" / "dictionary.tsv").string() + "\n"
                   "out = " + (dir / out).string() + "\n"
                   "epochs = 1\nbatch = 8\nmax_len = 48\nd_model = 16\nlayers = 2\n"
                   "heads = 2\nff = 32\ndropout = 0\n";
        };
        spit(dir / "plan_a.cfg", plan_for("out_a"));
        spit(dir / "plan_b.cfg", plan_for("out_b"));
        cmd_run((dir / "plan_a.cfg").string(), 1);
        cmd_run((dir / "plan_b.cfg").string(), 2);
        const auto sum_a = slurp(dir / "out_a" / "summary.csv");
        check(!sum_a.empty() && sum_a == slurp(dir / "out_b" / "summary.csv"),
              "summary CSVs differ between reruns");
        check(slurp(dir / "out_a" / "sweep.csv") == slurp(dir / "out_b" / "sweep.csv"),
              "sweep CSVs differ between reruns");
        return fmt("10 units, summary %zu bytes identical across 1- and 2-worker reruns",
                   sum_a.size());
    });

    std::printf("%d of 10 criteria passed\n", 10 - g_failures);
    return g_failures;
}
