#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "knit/assemble.hpp"
#include "knit/encoder.hpp"
#include "knit/gradcheck.hpp"
#include "knit/kstore.hpp"
#include "knit/rng.hpp"
#include "knit/vocab.hpp"

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "knit_encoder_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

struct Fixture {
    knit::Vocabulary vocab;
    knit::KnowledgeStore store;
    knit::EncoderConfig cfg;
};

Fixture make_fixture(int d_model = 16, int layers = 2, int heads = 2) {
    std::vector<std::string> corpus;
    for (int i = 0; i < 30; ++i) corpus.push_back("t" + std::to_string(i));
    std::vector<std::tuple<std::string, std::string, std::string>> rows = {
        {"ent0", "surf0", "alpha beta gamma"},
        {"ent1", "surf1", "delta epsilon"},
    };
    for (const auto& [id, surface, definition] : rows) corpus.push_back(surface + " : " + definition);
    const auto dict = temp_file("dict.tsv");
    knit::write_dictionary(dict.string(), rows);
    Fixture f;
    f.vocab = knit::build_vocab(corpus, 1);
    f.store = knit::load_dictionary(dict.string(), f.vocab);
    f.cfg.vocab_size = f.vocab.size();
    f.cfg.d_model = d_model;
    f.cfg.layers = layers;
    f.cfg.heads = heads;
    f.cfg.ff = d_model * 2;
    f.cfg.max_positions = 64;
    f.cfg.dropout = 0.0;
    return f;
}

knit::TokenSequence make_seq(const Fixture& f, int L,
                             const std::vector<std::pair<int, std::string>>& anchors) {
    knit::TokenSequence seq;
    for (int t = 0; t < L; ++t) {
        seq.tokens.push_back("t" + std::to_string(t));
        seq.pos_tags.push_back("NOUN");
    }
    seq.ids = f.vocab.encode(seq.tokens);
    for (const auto& [p, id] : anchors) seq.spans.push_back({p, p, id, seq.tokens[p], false});
    return seq;
}

} // namespace

TEST_CASE("annealing is the exact linear ramp", "[encoder]") {
    knit::AnnealSchedule s{0.2, 1000};
    REQUIRE(knit::anneal_alpha(0, s) == 0.0);
    REQUIRE(knit::anneal_alpha(1000, s) == 0.2);
    REQUIRE(knit::anneal_alpha(500, knit::AnnealSchedule{0.3, 1000}) == 0.15);
    for (long t = 0; t <= 1000; ++t)
        REQUIRE(knit::anneal_alpha(t, s) == 0.2 * static_cast<double>(t) / 1000.0);
    REQUIRE_THROWS_AS(knit::anneal_alpha(-1, s), std::out_of_range);
    REQUIRE_THROWS_AS(knit::anneal_alpha(1001, s), std::out_of_range);
}

TEST_CASE("zero-alpha injection is bit-identical to no injection", "[encoder]") {
    auto f = make_fixture();
    for (int draw = 0; draw < 20; ++draw) {
        knit::ParamStore<float> ps;
        knit::init_encoder_params(ps, f.cfg, 900 + draw);
        knit::init_projection_params<float>(ps, 6, f.cfg, 901 + draw);
        const auto seq = make_seq(f, 5, {{1, "ent0"}});
        const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);

        knit::RngStream hr(draw, "h-draw");
        knit::Tensor<float> h(1, 6);
        for (auto& v : h.v) v = static_cast<float>(hr.normal());

        knit::Graph<float> g0;
        knit::ForwardOptions<float> plain;
        const auto base = knit::encoder_forward(g0, ps, f.cfg, inp, plain);

        knit::Graph<float> g1;
        knit::Injection<float> inj;
        inj.anchors = {inp.segments[0].anchor};
        inj.h = g1.leaf(h);
        inj.alpha = 0.0;
        knit::ForwardOptions<float> with;
        with.injection = &inj;
        const auto got = knit::encoder_forward(g1, ps, f.cfg, inp, with);

        REQUIRE(base.acts.size() == got.acts.size());
        for (std::size_t l = 0; l < base.acts.size(); ++l)
            REQUIRE(g0.val(base.acts[l]).v == g1.val(got.acts[l]).v); // bitwise
        REQUIRE(g0.val(base.normed_top).v == g1.val(got.normed_top).v);
    }
}

TEST_CASE("freshly initialized projection contributes exactly nothing", "[encoder]") {
    auto f = make_fixture();
    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 11);
    knit::init_projection_params<float>(ps, 4, f.cfg, 12);
    const auto seq = make_seq(f, 6, {{2, "ent1"}});
    const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);

    knit::Graph<float> g0;
    knit::ForwardOptions<float> plain;
    const auto base = knit::encoder_forward(g0, ps, f.cfg, inp, plain);

    knit::Graph<float> g1;
    knit::Tensor<float> h(1, 4);
    h.fill(2.5f);
    knit::Injection<float> inj{{inp.segments[0].anchor}, g1.leaf(h), 0.7};
    knit::ForwardOptions<float> with;
    with.injection = &inj;
    const auto got = knit::encoder_forward(g1, ps, f.cfg, inp, with);
    for (std::size_t l = 0; l < base.acts.size(); ++l)
        REQUIRE(g0.val(base.acts[l]).v == g1.val(got.acts[l]).v);
}

TEST_CASE("injection perturbs only anchor rows of the embedding output", "[encoder]") {
    auto f = make_fixture();
    knit::ParamStore<double> ps;
    knit::init_encoder_params(ps, f.cfg, 31);
    knit::init_projection_params<double>(ps, 4, f.cfg, 32);
    // make the projection output nonzero
    for (auto& v : ps.get("proj/w2").value.v) v = 0.05;
    const auto seq = make_seq(f, 7, {{1, "ent0"}, {4, "ent1"}});
    const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);

    knit::Graph<double> g0;
    knit::ForwardOptions<double> plain;
    const auto base = knit::encoder_forward(g0, ps, f.cfg, inp, plain);

    knit::Graph<double> g1;
    knit::Tensor<double> h(2, 4);
    h.fill(1.0);
    knit::Injection<double> inj{{inp.segments[0].anchor, inp.segments[1].anchor}, g1.leaf(h), 0.4};
    knit::ForwardOptions<double> with;
    with.injection = &inj;
    const auto got = knit::encoder_forward(g1, ps, f.cfg, inp, with);

    const auto& c0a = g0.val(base.acts[0]);
    const auto& c0b = g1.val(got.acts[0]);
    for (int t = 0; t < inp.length(); ++t) {
        const bool is_anchor = t == inp.segments[0].anchor || t == inp.segments[1].anchor;
        bool row_equal = true;
        for (int j = 0; j < f.cfg.d_model; ++j)
            row_equal = row_equal && (c0a.at(t, j) == c0b.at(t, j));
        REQUIRE(row_equal == !is_anchor);
    }
}

TEST_CASE("visibility-masked forward leaves layer-1 non-anchor x rows bit-identical",
          "[encoder]") {
    auto f = make_fixture();
    for (int draw = 0; draw < 10; ++draw) {
        knit::ParamStore<float> ps;
        knit::init_encoder_params(ps, f.cfg, 500 + draw);
        auto seq = make_seq(f, 6, {{1, "ent0"}, {3, "ent1"}});
        const auto with_desc = knit::assemble(seq, f.store, knit::Layout::append, 64);
        knit::TokenSequence bare = seq;
        bare.spans.clear();
        const auto no_desc = knit::assemble(bare, f.store, knit::Layout::append, 64);
        const auto mask = knit::build_visibility_mask(with_desc);

        knit::Graph<float> g0;
        knit::ForwardOptions<float> plain;
        const auto base = knit::encoder_forward(g0, ps, f.cfg, no_desc, plain);

        knit::Graph<float> g1;
        knit::ForwardOptions<float> masked;
        masked.mask = &mask;
        const auto got = knit::encoder_forward(g1, ps, f.cfg, with_desc, masked);

        const auto& c1a = g0.val(base.acts[1]);
        const auto& c1b = g1.val(got.acts[1]);
        for (int t = 0; t < no_desc.base_len; ++t) {
            if (t == with_desc.segments[0].anchor || t == with_desc.segments[1].anchor) continue;
            for (int j = 0; j < f.cfg.d_model; ++j) REQUIRE(c1a.at(t, j) == c1b.at(t, j));
        }
        // sanity: the anchor row does change once its description is visible
        bool anchor_differs = false;
        const int a = with_desc.segments[0].anchor;
        for (int j = 0; j < f.cfg.d_model; ++j)
            anchor_differs = anchor_differs || (c1a.at(a, j) != c1b.at(a, j));
        REQUIRE(anchor_differs);
    }
}

TEST_CASE("an all-zeros mask equals no mask at all", "[encoder]") {
    auto f = make_fixture();
    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 77);
    const auto seq = make_seq(f, 5, {});
    const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);
    knit::VisibilityMask all;
    all.T = inp.length();
    all.visible.assign(static_cast<std::size_t>(all.T) * all.T, 1);

    knit::Graph<float> g0, g1;
    knit::ForwardOptions<float> plain;
    knit::ForwardOptions<float> full;
    full.mask = &all;
    const auto a = knit::encoder_forward(g0, ps, f.cfg, inp, plain);
    const auto b = knit::encoder_forward(g1, ps, f.cfg, inp, full);
    for (std::size_t l = 0; l < a.acts.size(); ++l)
        REQUIRE(g0.val(a.acts[l]).v == g1.val(b.acts[l]).v);
}

TEST_CASE("description-derived entity vectors are deterministic and sensitive", "[encoder]") {
    auto f = make_fixture();
    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 41);
    const auto& desc = *f.store.lookup("ent0").description;

    knit::Graph<float> g;
    const auto v1 = knit::derive_kt_emb(g, ps, f.cfg, desc.ids);
    const auto v2 = knit::derive_kt_emb(g, ps, f.cfg, desc.ids);
    REQUIRE(g.val(v1).v == g.val(v2).v);
    REQUIRE(g.val(v1).rows() == 1);
    REQUIRE(g.val(v1).cols() == f.cfg.d_model);

    auto perturbed = desc.ids;
    perturbed.back() = f.vocab.id_of("t7");
    const auto v3 = knit::derive_kt_emb(g, ps, f.cfg, perturbed);
    REQUIRE(g.val(v1).v != g.val(v3).v);

    REQUIRE_THROWS_AS(knit::derive_kt_emb(g, ps, f.cfg, std::vector<int>{}),
                      std::invalid_argument);
}

TEST_CASE("gradients flow through the description pass unless stopped", "[encoder]") {
    auto f = make_fixture();
    const auto& desc = *f.store.lookup("ent0").description;

    for (bool stop : {false, true}) {
        knit::ParamStore<float> ps;
        knit::init_encoder_params(ps, f.cfg, 43);
        knit::Graph<float> g;
        const auto v = knit::derive_kt_emb(g, ps, f.cfg, desc.ids, stop);
        g.backward(g.mean_all(v));
        double grad_mag = 0.0;
        for (auto x : ps.get("enc/emb/tok").grad.v) grad_mag += std::abs(x);
        if (stop) {
            REQUIRE(grad_mag == 0.0);
        } else {
            REQUIRE(grad_mag > 0.0);
        }
    }
}

TEST_CASE("task heads read the right positions", "[encoder]") {
    auto f = make_fixture();
    const auto seq = make_seq(f, 6, {{1, "ent0"}, {4, "ent1"}});
    const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);

    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 51);
    knit::TaskHead cls{knit::TaskHead::Kind::classification, 3};
    knit::init_head_params(ps, f.cfg, cls, 52);

    knit::Graph<float> g;
    knit::ForwardOptions<float> plain;
    const auto enc = knit::encoder_forward(g, ps, f.cfg, inp, plain);
    const auto logits = knit::head_forward(g, ps, cls, enc, inp);
    REQUIRE(g.val(logits).rows() == 1);
    REQUIRE(g.val(logits).cols() == 3);

    knit::ParamStore<float> ps2;
    knit::init_encoder_params(ps2, f.cfg, 51);
    knit::TaskHead sl{knit::TaskHead::Kind::sequence_labeling, 4};
    knit::init_head_params(ps2, f.cfg, sl, 52);
    knit::Graph<float> g2;
    const auto enc2 = knit::encoder_forward(g2, ps2, f.cfg, inp, plain);
    const auto tags = knit::head_forward(g2, ps2, sl, enc2, inp);
    REQUIRE(g2.val(tags).rows() == inp.x_len); // descriptions excluded
    REQUIRE(g2.val(tags).cols() == 4);

    knit::ParamStore<float> ps3;
    knit::init_encoder_params(ps3, f.cfg, 51);
    knit::TaskHead reg{knit::TaskHead::Kind::regression, 1};
    knit::init_head_params(ps3, f.cfg, reg, 52);
    knit::Graph<float> g3;
    const auto enc3 = knit::encoder_forward(g3, ps3, f.cfg, inp, plain);
    const auto pred = knit::head_forward(g3, ps3, reg, enc3, inp);
    REQUIRE(g3.val(pred).is_scalar());
}

TEST_CASE("permuting description segments keeps labeling output aligned to x", "[encoder]") {
    auto f = make_fixture(16, 1, 2); // one layer: non-anchor x rows depend on x only
    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 61);
    knit::TaskHead sl{knit::TaskHead::Kind::sequence_labeling, 2};
    knit::init_head_params(ps, f.cfg, sl, 62);

    auto seq = make_seq(f, 6, {{1, "ent0"}, {3, "ent1"}});
    auto flipped = seq;
    std::swap(flipped.spans[0], flipped.spans[1]); // descriptions appended in swapped order

    auto run = [&](const knit::TokenSequence& s) {
        const auto inp = knit::assemble(s, f.store, knit::Layout::append, 64);
        const auto mask = knit::build_visibility_mask(inp);
        knit::Graph<float> g;
        knit::ForwardOptions<float> opt;
        opt.mask = &mask;
        const auto enc = knit::encoder_forward(g, ps, f.cfg, inp, opt);
        const auto logits = knit::head_forward(g, ps, sl, enc, inp);
        return g.val(logits);
    };
    const auto a = run(seq);
    const auto b = run(flipped);
    REQUIRE(a.rows() == 6);
    REQUIRE(b.rows() == 6);
    // rows 0..5 stay aligned to x tokens 0..5: non-anchor rows can't feel
    // the segment order at depth one
    for (int t : {0, 2, 4, 5})
        for (int j = 0; j < 2; ++j) REQUIRE(a.at(t, j) == b.at(t, j));
}

TEST_CASE("the forward rejects malformed inputs", "[encoder]") {
    auto f = make_fixture();
    knit::ParamStore<float> ps;
    knit::init_encoder_params(ps, f.cfg, 71);
    knit::init_projection_params<float>(ps, 4, f.cfg, 72);
    const auto seq = make_seq(f, 5, {{1, "ent0"}});
    const auto inp = knit::assemble(seq, f.store, knit::Layout::append, 64);

    knit::Graph<float> g;
    knit::Tensor<float> h(1, 9); // wrong width
    knit::Injection<float> inj{{inp.segments[0].anchor}, g.leaf(h), 0.5};
    knit::ForwardOptions<float> opt;
    opt.injection = &inj;
    REQUIRE_THROWS_WITH(knit::encoder_forward(g, ps, f.cfg, inp, opt),
                        Catch::Matchers::ContainsSubstring("dimension"));

    knit::Tensor<float> h2(1, 4);
    knit::Injection<float> inj2{{inp.length() - 1}, g.leaf(h2), 0.5}; // anchor in a segment
    opt.injection = &inj2;
    REQUIRE_THROWS_WITH(knit::encoder_forward(g, ps, f.cfg, inp, opt),
                        Catch::Matchers::ContainsSubstring("x region"));

    knit::EncoderConfig bad = f.cfg;
    bad.max_positions = 8;
    knit::ForwardOptions<float> plain;
    REQUIRE_THROWS_WITH(knit::encoder_forward(g, ps, bad, inp, plain),
                        Catch::Matchers::ContainsSubstring("max positions"));
}

namespace {

// Gradient-check fixture covering the full knowledge path: visibility mask,
// description-derived entity vector through the shared encoder, projection
// MLP, injection, and a classification loss.
struct FullPathCheck {
    knit::EncoderConfig cfg;
    knit::AssembledInput inp;
    knit::VisibilityMask mask;
    std::vector<int> desc_ids;
    int anchor;

    template <typename S>
    void setup(knit::ParamStore<S>& ps) const {
        knit::init_encoder_params(ps, cfg, 881);
        knit::init_projection_params<S>(ps, cfg.d_model, cfg, 882);
        knit::TaskHead head{knit::TaskHead::Kind::classification, 2};
        knit::init_head_params(ps, cfg, head, 883);
        // nonzero second affine so gradient actually reaches the projection
        knit::RngStream rng(884, "proj-w2");
        for (auto& v : ps.get("proj/w2").value.v) v = static_cast<S>(rng.normal() * 0.1);
    }

    template <typename S>
    int build(knit::Graph<S>& g, knit::ParamStore<S>& ps) const {
        const auto h = knit::derive_kt_emb(g, ps, cfg, desc_ids);
        knit::Injection<S> inj{{anchor}, h, 0.35};
        knit::ForwardOptions<S> opt;
        opt.mask = &mask;
        opt.injection = &inj;
        const auto enc = knit::encoder_forward(g, ps, cfg, inp, opt);
        knit::TaskHead head{knit::TaskHead::Kind::classification, 2};
        const auto logits = knit::head_forward(g, ps, head, enc, inp);
        return g.softmax_cross_entropy(logits, {1});
    }
};

} // namespace

TEST_CASE("gradient check covers the full knowledge path", "[encoder]") {
    auto f = make_fixture(8, 2, 2);
    FullPathCheck fc;
    fc.cfg = f.cfg;
    const auto seq = make_seq(f, 4, {{1, "ent0"}});
    fc.inp = knit::assemble(seq, f.store, knit::Layout::append, 64);
    fc.mask = knit::build_visibility_mask(fc.inp);
    fc.desc_ids = f.store.lookup("ent0").description->ids;
    fc.anchor = fc.inp.segments[0].anchor;

    auto setup = [&fc](auto& ps) { fc.setup(ps); };
    auto build = [&fc](auto& g, auto& ps) { return fc.build(g, ps); };

    const auto res64 = knit::gradient_check<double>(setup, build, /*stride=*/3);
    INFO("64-bit worst " << res64.worst_param << "[" << res64.worst_index << "] analytic "
                         << res64.analytic_at_worst << " numeric " << res64.numeric_at_worst);
    REQUIRE(res64.checked > 500);
    REQUIRE(res64.within(1e-6));

    const auto res32 = knit::gradient_check<float>(setup, build, /*stride=*/3);
    INFO("32-bit worst " << res32.worst_param << "[" << res32.worst_index << "] analytic "
                         << res32.analytic_at_worst << " numeric " << res32.numeric_at_worst);
    REQUIRE(res32.within(1e-3));
}
