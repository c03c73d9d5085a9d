// Pre-LN transformer encoder with mask-aware attention, embedding-level
// entity-vector injection, and task heads. All parameters live in a
// ParamStore under "enc/", "proj/", and "head/" names, so checkpoints carry
// the whole model.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/assemble.hpp"
#include "knit/autodiff.hpp"
#include "knit/rng.hpp"

namespace knit {

struct EncoderConfig {
    int vocab_size = 0;
    int d_model = 128;
    int layers = 4;
    int heads = 4;
    int ff = 256;
    int max_positions = 256;
    double dropout = 0.1;

    void validate() const {
        if (vocab_size <= 0) throw std::invalid_argument("encoder: vocab_size must be positive");
        if (layers < 1) throw std::invalid_argument("encoder: need at least one layer");
        if (heads < 1 || d_model % heads != 0)
            throw std::invalid_argument("encoder: d_model must be divisible by heads");
        if (max_positions < 4) throw std::invalid_argument("encoder: max_positions too small");
    }

    int head_dim() const { return d_model / heads; }
};

namespace detail {

template <typename S>
Param<S>& create_normal(ParamStore<S>& ps, const std::string& name, int r, int c,
                        std::uint64_t seed, double sd) {
    auto& p = ps.create(name, r, c);
    // one stream per parameter: adding parameters never reshuffles the
    // initialization of existing ones
    RngStream rng(seed, "init/" + name);
    for (auto& v : p.value.v) v = static_cast<S>(rng.normal() * sd);
    return p;
}

template <typename S>
Param<S>& create_const(ParamStore<S>& ps, const std::string& name, int r, int c, S value) {
    auto& p = ps.create(name, r, c);
    p.value.fill(value);
    return p;
}

} // namespace detail

template <typename S>
void init_encoder_params(ParamStore<S>& ps, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int d = cfg.d_model;
    detail::create_normal(ps, "enc/emb/tok", cfg.vocab_size, d, seed, 0.02);
    detail::create_normal(ps, "enc/emb/pos", cfg.max_positions, d, seed, 0.02);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "enc/l" + std::to_string(l) + "/";
        detail::create_const<S>(ps, base + "ln1/g", 1, d, S(1));
        detail::create_const<S>(ps, base + "ln1/b", 1, d, S(0));
        for (const char* m : {"wq", "wk", "wv", "wo"})
            detail::create_normal(ps, base + "attn/" + m, d, d, seed, 0.02);
        // no key bias: softmax is invariant to the constant per-row score
        // shift a key bias induces, making it dead weight
        for (const char* m : {"bq", "bv", "bo"})
            detail::create_const<S>(ps, base + "attn/" + m, 1, d, S(0));
        detail::create_const<S>(ps, base + "ln2/g", 1, d, S(1));
        detail::create_const<S>(ps, base + "ln2/b", 1, d, S(0));
        detail::create_normal(ps, base + "ff/w1", d, cfg.ff, seed, 0.02);
        detail::create_const<S>(ps, base + "ff/b1", 1, cfg.ff, S(0));
        detail::create_normal(ps, base + "ff/w2", cfg.ff, d, seed, 0.02);
        detail::create_const<S>(ps, base + "ff/b2", 1, d, S(0));
    }
    detail::create_const<S>(ps, "enc/lnf/g", 1, d, S(1));
    detail::create_const<S>(ps, "enc/lnf/b", 1, d, S(0));
}

// Two affine layers with tanh mapping entity vectors (dimension in_dim)
// into the embedding space. The final affine starts at exactly zero so the
// first training step's forward cannot differ from the baseline.
template <typename S>
void init_projection_params(ParamStore<S>& ps, int in_dim, const EncoderConfig& cfg,
                            std::uint64_t seed) {
    detail::create_normal(ps, "proj/w1", in_dim, cfg.d_model, seed, 0.02);
    detail::create_const<S>(ps, "proj/b1", 1, cfg.d_model, S(0));
    detail::create_const<S>(ps, "proj/w2", cfg.d_model, cfg.d_model, S(0));
    detail::create_const<S>(ps, "proj/b2", 1, cfg.d_model, S(0));
}

struct TaskHead {
    enum class Kind { classification, regression, sequence_labeling };
    Kind kind = Kind::classification;
    int classes = 2; // 1 for regression

    int output_dim() const { return kind == Kind::regression ? 1 : classes; }
};

template <typename S>
void init_head_params(ParamStore<S>& ps, const EncoderConfig& cfg, const TaskHead& head,
                      std::uint64_t seed) {
    detail::create_normal(ps, "head/w", cfg.d_model, head.output_dim(), seed, 0.02);
    detail::create_const<S>(ps, "head/b", 1, head.output_dim(), S(0));
}

// Linear ramp of the injection weight: alpha(t) = lambda * t / total_steps.
struct AnnealSchedule {
    double lambda_value = 0.0;
    long total_steps = 1;
};

inline double anneal_alpha(long step, const AnnealSchedule& s) {
    if (s.total_steps < 1) throw std::invalid_argument("anneal: total_steps must be >= 1");
    if (step < 0 || step > s.total_steps)
        throw std::out_of_range("anneal: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(s.total_steps) + "]");
    return s.lambda_value * static_cast<double>(step) / static_cast<double>(s.total_steps);
}

// Entity vectors to add at anchor embeddings, scaled by alpha. `h` holds one
// row per anchor and may be a constant leaf (graph embeddings) or a node
// with gradient history (description-derived embeddings).
template <typename S>
struct Injection {
    std::vector<int> anchors;
    typename Graph<S>::NodeId h = -1;
    double alpha = 0.0;
};

template <typename S>
struct ForwardOptions {
    using EmbedHook =
        std::function<typename Graph<S>::NodeId(Graph<S>&, typename Graph<S>::NodeId)>;

    const VisibilityMask* mask = nullptr;    // nullptr = full attention
    const Injection<S>* injection = nullptr;
    bool train_mode = false;
    RngStream* dropout_rng = nullptr;
    // Optional rewrite of the embedding matrix c0 before the first layer
    // (used by input-masking analysis to blend rows toward a baseline).
    const EmbedHook* embed_hook = nullptr;
};

template <typename S>
struct EncoderOut {
    std::vector<typename Graph<S>::NodeId> acts; // c0..c(layers), residual stream
    typename Graph<S>::NodeId normed_top = -1;   // final layer norm, for heads
};

template <typename S>
EncoderOut<S> encoder_forward(Graph<S>& g, ParamStore<S>& ps, const EncoderConfig& cfg,
                              const AssembledInput& inp, const ForwardOptions<S>& opt) {
    cfg.validate();
    const int T = inp.length();
    if (T > cfg.max_positions)
        throw std::invalid_argument("encoder: sequence length " + std::to_string(T) +
                                    " exceeds max positions " + std::to_string(cfg.max_positions));
    if (opt.mask && opt.mask->T != T)
        throw std::invalid_argument("encoder: mask size does not match input");
    const bool use_dropout = opt.train_mode && cfg.dropout > 0.0;
    if (use_dropout && !opt.dropout_rng)
        throw std::invalid_argument("encoder: training with dropout requires an rng stream");

    auto c = g.add(g.rows_of(ps.get("enc/emb/tok"), inp.ids),
                   g.rows_of(ps.get("enc/emb/pos"), inp.positions));

    // Embedding-level injection; skipped entirely at alpha == 0 so the zero
    // setting is bit-identical to no injection at all.
    if (opt.injection && opt.injection->alpha != 0.0) {
        const auto& inj = *opt.injection;
        if (static_cast<int>(inj.anchors.size()) != g.val(inj.h).rows())
            throw std::invalid_argument("encoder: one injection row per anchor required");
        if (g.val(inj.h).cols() != ps.get("proj/w1").value.rows())
            throw std::invalid_argument("encoder: injection vector dimension " +
                                        std::to_string(g.val(inj.h).cols()) +
                                        " does not match projection input " +
                                        std::to_string(ps.get("proj/w1").value.rows()));
        for (int a : inj.anchors)
            if (a < 0 || a >= inp.base_len)
                throw std::invalid_argument("encoder: injection anchor outside the x region");
        const auto hidden = g.tanh_op(g.linear(inj.h, ps.get("proj/w1"), &ps.get("proj/b1")));
        const auto mlp = g.linear(hidden, ps.get("proj/w2"), &ps.get("proj/b2"));
        for (std::size_t i = 0; i < inj.anchors.size(); ++i)
            c = g.add_scaled_row(c, inj.anchors[i], g.gather_rows(mlp, {static_cast<int>(i)}),
                                 static_cast<S>(inj.alpha));
    }

    if (opt.embed_hook) {
        c = (*opt.embed_hook)(g, c);
        if (g.val(c).rows() != T || g.val(c).cols() != cfg.d_model)
            throw std::invalid_argument("encoder: embed hook changed the input shape");
    }

    Tensor<S> addmask;
    if (opt.mask) addmask = opt.mask->template additive<S>();
    const Tensor<S>* maskp = opt.mask ? &addmask : nullptr;

    EncoderOut<S> out;
    out.acts.push_back(c);
    const int dh = cfg.head_dim();
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "enc/l" + std::to_string(l) + "/";
        const auto a = g.layer_norm(c, ps.get(base + "ln1/g"), ps.get(base + "ln1/b"), S(1e-5));
        const auto q = g.linear(a, ps.get(base + "attn/wq"), &ps.get(base + "attn/bq"));
        const auto k = g.linear(a, ps.get(base + "attn/wk"));
        const auto v = g.linear(a, ps.get(base + "attn/wv"), &ps.get(base + "attn/bv"));
        std::vector<typename Graph<S>::NodeId> heads;
        for (int h = 0; h < cfg.heads; ++h) {
            const auto qh = g.slice_cols(q, h * dh, dh);
            const auto kh = g.slice_cols(k, h * dh, dh);
            const auto vh = g.slice_cols(v, h * dh, dh);
            const auto scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
            const auto probs = g.masked_softmax(scores, maskp);
            heads.push_back(g.matmul_nn(probs, vh));
        }
        auto attn = g.linear(g.concat_cols(heads), ps.get(base + "attn/wo"),
                             &ps.get(base + "attn/bo"));
        if (use_dropout) attn = g.dropout(attn, cfg.dropout, *opt.dropout_rng);
        c = g.add(c, attn);

        const auto b = g.layer_norm(c, ps.get(base + "ln2/g"), ps.get(base + "ln2/b"), S(1e-5));
        auto f = g.linear(g.gelu(g.linear(b, ps.get(base + "ff/w1"), &ps.get(base + "ff/b1"))),
                          ps.get(base + "ff/w2"), &ps.get(base + "ff/b2"));
        if (use_dropout) f = g.dropout(f, cfg.dropout, *opt.dropout_rng);
        c = g.add(c, f);
        out.acts.push_back(c);
    }
    out.normed_top = g.layer_norm(c, ps.get("enc/lnf/g"), ps.get("enc/lnf/b"), S(1e-5));
    return out;
}

// Encodes a description [CLS] d1..dn [SEP] with the shared encoder — full
// attention, no injection, no dropout — and returns the output
// representation of the first description token. Gradients flow into the
// shared weights unless stop_gradient is set.
template <typename S>
typename Graph<S>::NodeId derive_kt_emb(Graph<S>& g, ParamStore<S>& ps, const EncoderConfig& cfg,
                                        const std::vector<int>& description_ids,
                                        bool stop_gradient = false) {
    if (description_ids.empty()) throw std::invalid_argument("derive_kt_emb: empty description");
    AssembledInput inp;
    inp.ids.push_back(Vocabulary::kCls);
    inp.tokens.push_back("[CLS]");
    for (int id : description_ids) {
        inp.ids.push_back(id);
        inp.tokens.push_back("");
    }
    inp.ids.push_back(Vocabulary::kSep);
    inp.tokens.push_back("[SEP]");
    inp.base_len = inp.length();
    inp.x_len = static_cast<int>(description_ids.size());
    inp.positions.resize(inp.ids.size());
    for (int t = 0; t < inp.length(); ++t) inp.positions[t] = t;

    ForwardOptions<S> opt; // eval mode, full attention
    const auto out = encoder_forward(g, ps, cfg, inp, opt);
    const auto vec = g.gather_rows(out.normed_top, {1});
    if (stop_gradient) return g.leaf(g.val(vec));
    return vec;
}

// Task readout: classification and regression read CLS; sequence labeling
// reads exactly the x-token positions (descriptions never receive tags).
template <typename S>
typename Graph<S>::NodeId head_forward(Graph<S>& g, ParamStore<S>& ps, const TaskHead& head,
                                       const EncoderOut<S>& enc, const AssembledInput& inp) {
    auto& w = ps.get("head/w");
    if (w.value.cols() != head.output_dim())
        throw std::invalid_argument("head: parameter/task dimension mismatch");
    if (head.kind == TaskHead::Kind::sequence_labeling) {
        std::vector<int> idx(static_cast<std::size_t>(inp.x_len));
        for (int t = 0; t < inp.x_len; ++t) idx[static_cast<std::size_t>(t)] = 1 + t;
        return g.linear(g.gather_rows(enc.normed_top, idx), w, &ps.get("head/b"));
    }
    return g.linear(g.gather_rows(enc.normed_top, {0}), w, &ps.get("head/b"));
}

} // namespace knit
