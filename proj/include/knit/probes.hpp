// Layer-wise information probing of a frozen model: a label probe (test
// accuracy tracks how much of the task output each layer keeps) and a
// masked-token reconstruction probe (held-out cross-entropy tracks how much
// of the input each layer keeps). Differences between a knowledge method
// and the baseline cancel the unknown entropy constants.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/train.hpp"

namespace knit {

struct ProbeConfig {
    int epochs = 5;
    double lr = 1e-3;
    int batch_size = 32;
    std::vector<std::uint64_t> seeds = {101, 102, 103}; // best-of-N probe fits
    double mask_fraction = 0.15;
    std::uint64_t mask_seed = 7; // fixed per-example masking pattern
    int heads = 2;               // attention heads inside the probe layer
};

struct MIProbeReport {
    std::string method;
    std::vector<double> x_loss; // per layer: held-out reconstruction cross-entropy
    std::vector<double> y_acc;  // per layer: held-out label-probe accuracy
};

struct DeltaMI {
    std::vector<double> dx; // baseline loss − method loss (input information)
    std::vector<double> dy; // method accuracy − baseline accuracy (output information)
};

inline DeltaMI delta_mi(const MIProbeReport& method, const MIProbeReport& baseline) {
    if (method.x_loss.size() != baseline.x_loss.size() ||
        method.y_acc.size() != baseline.y_acc.size() ||
        method.x_loss.size() != method.y_acc.size())
        throw std::invalid_argument("delta_mi: mismatched layer counts");
    DeltaMI d;
    for (std::size_t l = 0; l < method.x_loss.size(); ++l) {
        d.dx.push_back(baseline.x_loss[l] - method.x_loss[l]);
        d.dy.push_back(method.y_acc[l] - baseline.y_acc[l]);
    }
    return d;
}

namespace detail {

// Probe: one pre-LN transformer layer (same wiring as the main encoder)
// followed by two fully-connected layers.
template <typename S>
void init_probe_params(ParamStore<S>& pp, int d, int out_dim, std::uint64_t seed) {
    create_const<S>(pp, "probe/ln1/g", 1, d, S(1));
    create_const<S>(pp, "probe/ln1/b", 1, d, S(0));
    for (const char* m : {"wq", "wk", "wv", "wo"})
        create_normal(pp, std::string("probe/attn/") + m, d, d, seed, 0.02);
    for (const char* m : {"bq", "bv", "bo"})
        create_const<S>(pp, std::string("probe/attn/") + m, 1, d, S(0));
    create_const<S>(pp, "probe/ln2/g", 1, d, S(1));
    create_const<S>(pp, "probe/ln2/b", 1, d, S(0));
    create_normal(pp, "probe/ff/w1", d, 2 * d, seed, 0.02);
    create_const<S>(pp, "probe/ff/b1", 1, 2 * d, S(0));
    create_normal(pp, "probe/ff/w2", 2 * d, d, seed, 0.02);
    create_const<S>(pp, "probe/ff/b2", 1, d, S(0));
    create_const<S>(pp, "probe/lnf/g", 1, d, S(1));
    create_const<S>(pp, "probe/lnf/b", 1, d, S(0));
    create_normal(pp, "probe/fc1/w", d, d, seed, 0.02);
    create_const<S>(pp, "probe/fc1/b", 1, d, S(0));
    create_normal(pp, "probe/fc2/w", d, out_dim, seed, 0.02);
    create_const<S>(pp, "probe/fc2/b", 1, out_dim, S(0));
}

template <typename S>
typename Graph<S>::NodeId probe_layer(Graph<S>& g, ParamStore<S>& pp,
                                      typename Graph<S>::NodeId x, int heads) {
    const int d = g.val(x).cols();
    if (d % heads != 0) throw std::invalid_argument("probe: heads must divide width");
    const int dh = d / heads;
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const auto a = g.layer_norm(x, pp.get("probe/ln1/g"), pp.get("probe/ln1/b"), S(1e-5));
    const auto q = g.linear(a, pp.get("probe/attn/wq"), &pp.get("probe/attn/bq"));
    const auto k = g.linear(a, pp.get("probe/attn/wk"));
    const auto v = g.linear(a, pp.get("probe/attn/wv"), &pp.get("probe/attn/bv"));
    std::vector<typename Graph<S>::NodeId> hs;
    for (int h = 0; h < heads; ++h) {
        const auto qh = g.slice_cols(q, h * dh, dh);
        const auto kh = g.slice_cols(k, h * dh, dh);
        const auto vh = g.slice_cols(v, h * dh, dh);
        const auto probs = g.masked_softmax(g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh), nullptr);
        hs.push_back(g.matmul_nn(probs, vh));
    }
    auto c = g.add(x, g.linear(g.concat_cols(hs), pp.get("probe/attn/wo"),
                               &pp.get("probe/attn/bo")));
    const auto b = g.layer_norm(c, pp.get("probe/ln2/g"), pp.get("probe/ln2/b"), S(1e-5));
    const auto f =
        g.linear(g.gelu(g.linear(b, pp.get("probe/ff/w1"), &pp.get("probe/ff/b1"))),
                 pp.get("probe/ff/w2"), &pp.get("probe/ff/b2"));
    c = g.add(c, f);
    return g.layer_norm(c, pp.get("probe/lnf/g"), pp.get("probe/lnf/b"), S(1e-5));
}

template <typename S>
typename Graph<S>::NodeId probe_readout(Graph<S>& g, ParamStore<S>& pp,
                                        typename Graph<S>::NodeId rows) {
    const auto h = g.tanh_op(g.linear(rows, pp.get("probe/fc1/w"), &pp.get("probe/fc1/b")));
    return g.linear(h, pp.get("probe/fc2/w"), &pp.get("probe/fc2/b"));
}

template <typename S>
Tensor<S> base_rows(const Tensor<S>& full, int base_len) {
    Tensor<S> t(base_len, full.cols());
    for (int r = 0; r < base_len; ++r)
        std::copy_n(full.row_ptr(r), full.cols(), t.row_ptr(r));
    return t;
}

} // namespace detail

// Residual-stream activations of the frozen model restricted to the shared
// [CLS] x [SEP] region, one tensor per (layer, example). The restriction
// keeps position sets comparable across methods with different appended
// text.
template <typename S>
std::vector<std::vector<Tensor<S>>> collect_activations(ParamStore<S>& model,
                                                        const RunConfig& cfg,
                                                        const std::vector<PreparedExample>& exs) {
    std::vector<std::vector<Tensor<S>>> by_layer(
        static_cast<std::size_t>(cfg.enc.layers) + 1);
    for (const auto& ex : exs) {
        Graph<S> g;
        const auto enc = method_forward(g, model, cfg, ex, eval_alpha(cfg), false, nullptr);
        for (std::size_t l = 0; l < by_layer.size(); ++l)
            by_layer[l].push_back(detail::base_rows(g.val(enc.acts[l]), ex.inp.base_len));
    }
    return by_layer;
}

// A copy of the example with a fixed subset of x tokens replaced by [MASK];
// positions index the assembled input (and equally the base-region slice).
struct MaskedExample {
    PreparedExample ex;
    std::vector<int> positions;
    std::vector<int> targets; // original token ids at the masked positions
};

inline MaskedExample mask_x_tokens(const PreparedExample& src, double fraction, RngStream& rng) {
    MaskedExample mc;
    mc.ex = src;
    const int L = src.inp.x_len;
    if (L < 1) throw std::invalid_argument("x-probe: no maskable positions");
    const int k = std::max(1, static_cast<int>(std::llround(fraction * L)));
    std::vector<int> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    for (int t : idx) {
        const int pos = 1 + t; // CLS offset
        mc.positions.push_back(pos);
        mc.targets.push_back(mc.ex.inp.ids[static_cast<std::size_t>(pos)]);
        mc.ex.inp.ids[static_cast<std::size_t>(pos)] = Vocabulary::kMask;
        mc.ex.inp.tokens[static_cast<std::size_t>(pos)] = "[MASK]";
    }
    return mc;
}

namespace detail {

template <typename S>
double fit_y_probe(const std::vector<Tensor<S>>& atrain, const std::vector<int>& ytrain,
                   const std::vector<Tensor<S>>& atest, const std::vector<int>& ytest,
                   int classes, const ProbeConfig& pc) {
    if (atrain.empty() || atest.empty())
        throw std::invalid_argument("y-probe: empty probe split");
    if (std::set<int>(ytrain.begin(), ytrain.end()).size() < 2)
        throw std::invalid_argument("y-probe: degenerate single-class dataset");
    const int d = atrain.front().cols();
    double best = -1.0;
    for (const auto seed : pc.seeds) {
        ParamStore<S> pp;
        init_probe_params(pp, d, classes, seed);
        AdamOptimizer<S> adam;
        RngStream shuffle_rng(seed, "probe/shuffle");
        std::vector<std::size_t> order(atrain.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (int epoch = 0; epoch < pc.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (std::size_t lo = 0; lo < order.size(); lo += pc.batch_size) {
                const std::size_t hi = std::min(order.size(), lo + pc.batch_size);
                pp.zero_grad();
                for (std::size_t i = lo; i < hi; ++i) {
                    const auto& a = atrain[order[i]];
                    Graph<S> g;
                    const auto h = probe_layer(g, pp, g.leaf(a), pc.heads);
                    const auto logits = probe_readout(g, pp, g.gather_rows(h, {0}));
                    const auto loss =
                        g.softmax_cross_entropy(logits, {ytrain[order[i]]});
                    g.backward(g.scale(loss, static_cast<S>(1.0 / static_cast<double>(hi - lo))));
                }
                adam.step(pp, pc.lr);
            }
        }
        std::size_t hit = 0;
        for (std::size_t i = 0; i < atest.size(); ++i) {
            Graph<S> g;
            const auto h = probe_layer(g, pp, g.leaf(atest[i]), pc.heads);
            const auto logits = probe_readout(g, pp, g.gather_rows(h, {0}));
            if (argmax_row(g.val(logits), 0) == ytest[i]) ++hit;
        }
        best = std::max(best, static_cast<double>(hit) / static_cast<double>(atest.size()));
    }
    return best;
}

template <typename S>
double fit_x_probe(const std::vector<Tensor<S>>& atrain,
                   const std::vector<const MaskedExample*>& mtrain,
                   const std::vector<Tensor<S>>& atest,
                   const std::vector<const MaskedExample*>& mtest, int vocab_size,
                   const ProbeConfig& pc) {
    if (atrain.empty() || atest.empty())
        throw std::invalid_argument("x-probe: empty probe split");
    const int d = atrain.front().cols();
    double best = std::numeric_limits<double>::infinity();
    for (const auto seed : pc.seeds) {
        ParamStore<S> pp;
        init_probe_params(pp, d, vocab_size, seed);
        AdamOptimizer<S> adam;
        RngStream shuffle_rng(seed, "probe/shuffle");
        std::vector<std::size_t> order(atrain.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (int epoch = 0; epoch < pc.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (std::size_t lo = 0; lo < order.size(); lo += pc.batch_size) {
                const std::size_t hi = std::min(order.size(), lo + pc.batch_size);
                pp.zero_grad();
                for (std::size_t i = lo; i < hi; ++i) {
                    const auto& mc = *mtrain[order[i]];
                    Graph<S> g;
                    const auto h = probe_layer(g, pp, g.leaf(atrain[order[i]]), pc.heads);
                    const auto logits =
                        probe_readout(g, pp, g.gather_rows(h, mc.positions));
                    const auto loss = g.softmax_cross_entropy(logits, mc.targets);
                    g.backward(g.scale(loss, static_cast<S>(1.0 / static_cast<double>(hi - lo))));
                }
                adam.step(pp, pc.lr);
            }
        }
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < atest.size(); ++i) {
            const auto& mc = *mtest[i];
            Graph<S> g;
            const auto h = probe_layer(g, pp, g.leaf(atest[i]), pc.heads);
            const auto logits = probe_readout(g, pp, g.gather_rows(h, mc.positions));
            const auto loss = g.softmax_cross_entropy(logits, mc.targets);
            total += static_cast<double>(g.val(loss).v[0]) * mc.positions.size();
            count += mc.positions.size();
        }
        if (count == 0) throw std::invalid_argument("x-probe: no maskable positions");
        best = std::min(best, total / static_cast<double>(count));
    }
    return best;
}

inline std::vector<MaskedExample> build_masked_set(const std::vector<PreparedExample>& exs,
                                                   const ProbeConfig& pc) {
    std::vector<MaskedExample> out;
    RngStream rng(pc.mask_seed, "probe/xmask");
    for (const auto& ex : exs) out.push_back(mask_x_tokens(ex, pc.mask_fraction, rng));
    return out;
}

} // namespace detail

// Label probe at one layer: train on probe-train activations, report
// probe-test accuracy, best over the configured probe seeds. The model's
// own parameters are read but never written.
template <typename S = float>
double train_y_probe(ParamStore<S>& model, const RunConfig& cfg, int layer,
                     const std::vector<PreparedExample>& probe_train,
                     const std::vector<PreparedExample>& probe_test,
                     const ProbeConfig& pc = {}) {
    if (layer < 0 || layer > cfg.enc.layers)
        throw std::invalid_argument("y-probe: layer out of range");
    if (cfg.head.kind != TaskHead::Kind::classification)
        throw std::invalid_argument("y-probe: classification tasks only");
    const auto atrain = collect_activations(model, cfg, probe_train);
    const auto atest = collect_activations(model, cfg, probe_test);
    std::vector<int> ytrain, ytest;
    for (const auto& ex : probe_train) ytrain.push_back(ex.gold_class);
    for (const auto& ex : probe_test) ytest.push_back(ex.gold_class);
    return detail::fit_y_probe(atrain[static_cast<std::size_t>(layer)], ytrain,
                               atest[static_cast<std::size_t>(layer)], ytest, cfg.head.classes,
                               pc);
}

// Reconstruction probe at one layer: a fixed 15% of x tokens (never
// description tokens) are replaced by [MASK] before the frozen model runs;
// the probe predicts the original tokens from the layer's activations.
// Returns held-out mean cross-entropy, best (lowest) over probe seeds.
template <typename S = float>
double train_x_probe(ParamStore<S>& model, const RunConfig& cfg, int layer,
                     const std::vector<PreparedExample>& probe_train,
                     const std::vector<PreparedExample>& probe_test,
                     const ProbeConfig& pc = {}) {
    if (layer < 0 || layer > cfg.enc.layers)
        throw std::invalid_argument("x-probe: layer out of range");
    const auto mtrain = detail::build_masked_set(probe_train, pc);
    const auto mtest = detail::build_masked_set(probe_test, pc);
    std::vector<PreparedExample> xtrain, xtest;
    std::vector<const MaskedExample*> ptrain, ptest;
    for (const auto& m : mtrain) xtrain.push_back(m.ex);
    for (const auto& m : mtest) xtest.push_back(m.ex);
    for (const auto& m : mtrain) ptrain.push_back(&m);
    for (const auto& m : mtest) ptest.push_back(&m);
    const auto atrain = collect_activations(model, cfg, xtrain);
    const auto atest = collect_activations(model, cfg, xtest);
    return detail::fit_x_probe(atrain[static_cast<std::size_t>(layer)], ptrain,
                               atest[static_cast<std::size_t>(layer)], ptest,
                               cfg.enc.vocab_size, pc);
}

// Full per-layer report; shares the frozen-model activation passes across
// layers.
template <typename S = float>
MIProbeReport probe_report(ParamStore<S>& model, const RunConfig& cfg,
                           const std::vector<PreparedExample>& probe_train,
                           const std::vector<PreparedExample>& probe_test,
                           const ProbeConfig& pc = {}) {
    MIProbeReport rep;
    rep.method = method_name(cfg.method);

    std::vector<int> ytrain, ytest;
    for (const auto& ex : probe_train) ytrain.push_back(ex.gold_class);
    for (const auto& ex : probe_test) ytest.push_back(ex.gold_class);
    const auto atrain = collect_activations(model, cfg, probe_train);
    const auto atest = collect_activations(model, cfg, probe_test);

    const auto mtrain = detail::build_masked_set(probe_train, pc);
    const auto mtest = detail::build_masked_set(probe_test, pc);
    std::vector<PreparedExample> xtrain, xtest;
    std::vector<const MaskedExample*> ptrain, ptest;
    for (const auto& m : mtrain) xtrain.push_back(m.ex);
    for (const auto& m : mtest) xtest.push_back(m.ex);
    for (const auto& m : mtrain) ptrain.push_back(&m);
    for (const auto& m : mtest) ptest.push_back(&m);
    const auto amtrain = collect_activations(model, cfg, xtrain);
    const auto amtest = collect_activations(model, cfg, xtest);

    for (int l = 0; l <= cfg.enc.layers; ++l) {
        rep.y_acc.push_back(detail::fit_y_probe(atrain[static_cast<std::size_t>(l)], ytrain,
                                                atest[static_cast<std::size_t>(l)], ytest,
                                                cfg.head.classes, pc));
        rep.x_loss.push_back(detail::fit_x_probe(amtrain[static_cast<std::size_t>(l)], ptrain,
                                                 amtest[static_cast<std::size_t>(l)], ptest,
                                                 cfg.enc.vocab_size, pc));
    }
    return rep;
}

} // namespace knit
