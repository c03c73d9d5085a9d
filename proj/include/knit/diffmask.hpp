// Differentiable input masking of a frozen model: per-level gate networks
// score every sentence token from the clean residual stream; the product of
// the per-level gates erases token embeddings toward a learned baseline
// vector. Gates are trained to mask as many tokens as possible while the
// model's output distribution stays within a divergence budget, enforced
// through a Lagrange multiplier.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/train.hpp"

namespace knit {

struct DiffMaskConfig {
    double temperature = 0.2; // binary-concrete temperature
    double stretch_lo = -0.2; // support stretched below 0 ...
    double stretch_hi = 1.2;  // ... and above 1, then hard-rectified
    double margin = 0.05;     // divergence budget m
    double sparsity_weight = 1.0;
    double lr = 3e-3;
    double multiplier_init = 1.0; // constraint active from the first step
    double multiplier_lr = 0.1;   // ascent rate on the constraint
    double multiplier_max = 10.0; // cap keeps sparsity pressure competitive
    int epochs = 20;
    int batch_size = 16;
    int gate_hidden = 32;
    std::uint64_t seed = 1;

    void validate() const {
        if (temperature <= 0.0) throw std::invalid_argument("diffmask: temperature must be positive");
        if (!(stretch_lo < 0.0 && stretch_hi > 1.0))
            throw std::invalid_argument("diffmask: stretch interval must cover [0,1] strictly");
        if (margin <= 0.0) throw std::invalid_argument("diffmask: margin must be positive");
        if (sparsity_weight < 0.0) throw std::invalid_argument("diffmask: sparsity weight must be nonnegative");
        if (multiplier_max <= 0.0) throw std::invalid_argument("diffmask: multiplier cap must be positive");
        if (multiplier_init < 0.0 || multiplier_init > multiplier_max)
            throw std::invalid_argument("diffmask: multiplier start must lie within [0, cap]");
        if (epochs < 0 || batch_size < 1 || gate_hidden < 1)
            throw std::invalid_argument("diffmask: bad optimization settings");
    }

    // Shift that turns a gate score into the probability of a nonzero
    // rectified sample: P(v > 0) = sigmoid(score − T·log(−lo/hi)).
    double open_shift() const { return -temperature * std::log(-stretch_lo / stretch_hi); }
};

// Trained gate networks (one per residual level 0..levels) plus the learned
// baseline vector and the constraint state.
template <typename S = float>
struct MaskGateStack {
    ParamStore<S> params;
    double multiplier = 0.0;
    int levels = 0;
    int d_model = 0;
    Layout layout = Layout::append;
    DiffMaskConfig cfg;
};

// Evaluation-mode gates for one input: z[l][j] is the product of all gate
// values up to level l for sentence token j, so columns are nonincreasing.
struct MaskHeatmap {
    std::vector<std::string> tokens;        // x tokens only
    std::vector<std::vector<double>> z;     // [levels+1][x_len]
    double prediction_clean = 0.0;          // argmax class or regression value
    double prediction_masked = 0.0;
    double divergence = 0.0;                // clean-vs-masked output divergence
};

// Fraction of tokens the top-level mask turns off.
inline double masked_fraction(const MaskHeatmap& hm, double tau) {
    if (hm.z.empty() || hm.z.back().empty()) throw std::invalid_argument("heatmap: empty");
    std::size_t off = 0;
    for (double v : hm.z.back())
        if (v < tau) ++off;
    return static_cast<double>(off) / static_cast<double>(hm.z.back().size());
}

// Per-POS mean number of levels that keep a token (z ≥ τ), over a set of
// heatmaps with matching token-level POS tags.
inline std::map<std::string, double> pos_aggregate(const std::vector<MaskHeatmap>& maps,
                                                   const std::vector<std::vector<std::string>>& pos,
                                                   double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("pos_aggregate: tau must be in (0,1)");
    if (maps.size() != pos.size()) throw std::invalid_argument("pos_aggregate: heatmap/tag count mismatch");
    std::map<std::string, double> total;
    std::map<std::string, int> count;
    std::size_t levels = maps.empty() ? 0 : maps.front().z.size();
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& hm = maps[i];
        if (hm.z.size() != levels) throw std::invalid_argument("pos_aggregate: heatmaps disagree on layer count");
        if (pos[i].size() != hm.tokens.size())
            throw std::invalid_argument("pos_aggregate: token/tag length mismatch");
        for (std::size_t j = 0; j < hm.tokens.size(); ++j) {
            int kept = 0;
            for (const auto& row : hm.z) {
                if (row.size() != hm.tokens.size())
                    throw std::invalid_argument("pos_aggregate: ragged heatmap");
                if (row[j] >= tau) ++kept;
            }
            total[pos[i][j]] += kept;
            count[pos[i][j]] += 1;
        }
    }
    std::map<std::string, double> mean;
    for (const auto& [tag, sum] : total) mean[tag] = sum / count[tag];
    return mean;
}

namespace detail {

// Clean-pass cache for one example: sentence-token rows of every residual
// level, the reference output, and the clean prediction.
template <typename S>
struct CleanPass {
    std::vector<Tensor<S>> acts_x; // [levels+1] tensors of shape [x_len, d]
    Tensor<S> ref;                 // class probabilities or regression value
    double prediction = 0.0;
};

template <typename S>
Tensor<S> x_rows(const Tensor<S>& full, int x_len) {
    Tensor<S> t(x_len, full.cols());
    for (int r = 0; r < x_len; ++r)
        std::copy_n(full.row_ptr(r + 1), full.cols(), t.row_ptr(r));
    return t;
}

template <typename S>
CleanPass<S> clean_pass(ParamStore<S>& model, const RunConfig& cfg, const PreparedExample& ex) {
    Graph<S> g;
    const auto enc = method_forward(g, model, cfg, ex, eval_alpha(cfg), false, nullptr);
    CleanPass<S> cp;
    for (const auto act : enc.acts) cp.acts_x.push_back(x_rows(g.val(act), ex.inp.x_len));
    const auto out = head_forward(g, model, cfg.head, enc, ex.inp);
    const Tensor<S>& t = g.val(out);
    if (cfg.head.kind == TaskHead::Kind::classification) {
        // Same max-shifted softmax the divergence node applies internally.
        cp.ref = Tensor<S>(t.rows(), t.cols());
        for (int i = 0; i < t.rows(); ++i) {
            S mx = t.row_ptr(i)[0];
            for (int j = 1; j < t.cols(); ++j) mx = std::max(mx, t.row_ptr(i)[j]);
            S sum = S(0);
            for (int j = 0; j < t.cols(); ++j) {
                cp.ref.at(i, j) = std::exp(t.row_ptr(i)[j] - mx);
                sum += cp.ref.at(i, j);
            }
            for (int j = 0; j < t.cols(); ++j) cp.ref.at(i, j) /= sum;
        }
        cp.prediction = static_cast<double>(argmax_row(t, 0));
    } else {
        cp.ref = t;
        cp.prediction = static_cast<double>(t.v[0]);
    }
    return cp;
}

template <typename S>
void init_gate_params(MaskGateStack<S>& stack) {
    const int d = stack.d_model, gh = stack.cfg.gate_hidden;
    create_const<S>(stack.params, "gate/baseline", 1, d, S(0));
    for (int l = 0; l <= stack.levels; ++l) {
        const std::string base = "gate/l" + std::to_string(l) + "/";
        create_normal(stack.params, base + "w1", 2 * d, gh, stack.cfg.seed, 0.1);
        create_const<S>(stack.params, base + "b1", 1, gh, S(0));
        create_normal(stack.params, base + "w2", gh, 1, stack.cfg.seed, 0.1);
        // Start wide open: every token passes, so the divergence constraint
        // is satisfied from the first step.
        create_const<S>(stack.params, base + "b2", 1, 1, S(3));
    }
}

template <typename S>
typename Graph<S>::NodeId gate_scores(Graph<S>& g, MaskGateStack<S>& stack, int level,
                                      typename Graph<S>::NodeId c0x,
                                      typename Graph<S>::NodeId clx) {
    const std::string base = "gate/l" + std::to_string(level) + "/";
    const auto in = g.concat_cols({c0x, clx});
    const auto h = g.tanh_op(
        g.linear(in, stack.params.get(base + "w1"), &stack.params.get(base + "b1")));
    return g.linear(h, stack.params.get(base + "w2"), &stack.params.get(base + "b2"));
}

// ĉ⁰ = c⁰ + (1−z)·(b − c⁰), exactly c⁰ wherever z = 1. The z column spans
// the whole assembled input; callers pass 1 for positions outside x.
template <typename S>
typename Graph<S>::NodeId apply_mask(Graph<S>& g, MaskGateStack<S>& stack,
                                     typename Graph<S>::NodeId c0,
                                     typename Graph<S>::NodeId z_full) {
    const auto one_minus = g.affine(z_full, S(-1), S(1));
    const auto erased = g.scale(g.row_scale(c0, one_minus), S(-1));
    const auto filled = g.outer_rowvec(one_minus, stack.params.get("gate/baseline"));
    return g.add(g.add(c0, erased), filled);
}

template <typename S>
typename Graph<S>::NodeId pad_z(Graph<S>& g, typename Graph<S>::NodeId z_x, int total_len,
                                int x_len) {
    Tensor<S> head(1, 1);
    head.v[0] = S(1);
    std::vector<typename Graph<S>::NodeId> parts{g.leaf(std::move(head)), z_x};
    const int rest = total_len - 1 - x_len;
    if (rest > 0) {
        Tensor<S> tail(rest, 1);
        for (auto& v : tail.v) v = S(1);
        parts.push_back(g.leaf(std::move(tail)));
    }
    return g.concat_rows(parts);
}

} // namespace detail

// Deterministic heatmap for one input: expected-value gates per level,
// cumulative product down the stack, and the clean/masked predictions under
// the top-level mask.
template <typename S = float>
MaskHeatmap compute_heatmap(MaskGateStack<S>& stack, ParamStore<S>& model, const RunConfig& cfg,
                            const PreparedExample& ex) {
    if (ex.inp.layout != stack.layout)
        throw std::invalid_argument("heatmap: input layout differs from the training layout");
    if (cfg.enc.layers != stack.levels || cfg.enc.d_model != stack.d_model)
        throw std::invalid_argument("heatmap: model shape differs from the trained stack");

    const auto cp = detail::clean_pass(model, cfg, ex);
    const int L = ex.inp.x_len;

    MaskHeatmap hm;
    for (int j = 0; j < L; ++j) hm.tokens.push_back(ex.inp.tokens[static_cast<std::size_t>(j) + 1]);
    hm.prediction_clean = cp.prediction;

    // Expected value of the rectified relaxation, clamped to [0,1].
    std::vector<double> z(static_cast<std::size_t>(L), 1.0);
    const double span = stack.cfg.stretch_hi - stack.cfg.stretch_lo;
    for (int l = 0; l <= stack.levels; ++l) {
        Graph<S> g;
        const auto la = detail::gate_scores(g, stack, l, g.leaf(cp.acts_x[0]),
                                            g.leaf(cp.acts_x[static_cast<std::size_t>(l)]));
        for (int j = 0; j < L; ++j) {
            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(g.val(la).v[j])));
            const double v = std::clamp(s * span + stack.cfg.stretch_lo, 0.0, 1.0);
            z[static_cast<std::size_t>(j)] *= v;
        }
        hm.z.emplace_back(z.begin(), z.end());
    }

    // Masked prediction under the full product mask.
    Graph<S> g;
    Tensor<S> zt(L, 1);
    for (int j = 0; j < L; ++j) zt.v[static_cast<std::size_t>(j)] = static_cast<S>(z[static_cast<std::size_t>(j)]);
    const auto z_full = detail::pad_z(g, g.leaf(std::move(zt)),
                                      static_cast<int>(ex.inp.length()), L);
    typename ForwardOptions<S>::EmbedHook hook =
        [&stack, z_full](Graph<S>& hg, typename Graph<S>::NodeId c0) {
            return detail::apply_mask(hg, stack, c0, z_full);
        };
    const auto enc = method_forward(g, model, cfg, ex, eval_alpha(cfg), false, nullptr, &hook);
    const auto out = head_forward(g, model, cfg.head, enc, ex.inp);
    if (cfg.head.kind == TaskHead::Kind::classification) {
        hm.prediction_masked = static_cast<double>(detail::argmax_row(g.val(out), 0));
        hm.divergence = static_cast<double>(g.val(g.kl_to_reference(cp.ref, out)).v[0]);
    } else {
        hm.prediction_masked = static_cast<double>(g.val(out).v[0]);
        hm.divergence = static_cast<double>(g.val(g.squared_error(out, cp.ref)).v[0]);
    }
    return hm;
}

// Train the gate stack against a frozen model. The model's parameters
// receive gradients during backpropagation but are never stepped; only the
// gate parameters and the baseline vector move.
template <typename S = float>
MaskGateStack<S> train_gates(ParamStore<S>& model, const RunConfig& cfg,
                             const std::vector<PreparedExample>& data,
                             const DiffMaskConfig& dm = {}) {
    dm.validate();
    if (data.empty()) throw std::invalid_argument("diffmask: empty dataset");

    MaskGateStack<S> stack;
    stack.levels = cfg.enc.layers;
    stack.d_model = cfg.enc.d_model;
    stack.layout = data.front().inp.layout;
    stack.cfg = dm;
    stack.multiplier = dm.multiplier_init;
    detail::init_gate_params(stack);

    // Feasibility is structural: wide-open gates reproduce the clean output
    // exactly, so the constraint is satisfiable before any training.
    {
        const auto hm = compute_heatmap(stack, model, cfg, data.front());
        if (hm.divergence > dm.margin)
            throw std::logic_error("diffmask: constraint infeasible at the open-gate start");
    }

    std::vector<detail::CleanPass<S>> cache;
    cache.reserve(data.size());
    for (const auto& ex : data) cache.push_back(detail::clean_pass(model, cfg, ex));

    AdamOptimizer<S> adam;
    RngStream shuffle_rng(dm.seed, "diffmask/shuffle");
    RngStream noise_rng(dm.seed, "diffmask/noise");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const S inv_temp = static_cast<S>(1.0 / dm.temperature);
    const S span = static_cast<S>(dm.stretch_hi - dm.stretch_lo);
    const S lo = static_cast<S>(dm.stretch_lo);
    const S shift = static_cast<S>(dm.open_shift());

    for (int epoch = 0; epoch < dm.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += dm.batch_size) {
            const std::size_t hi = std::min(order.size(), at + dm.batch_size);
            const S inv_n = static_cast<S>(1.0 / static_cast<double>(hi - at));
            stack.params.zero_grad();
            model.zero_grad();
            double batch_div = 0.0;
            for (std::size_t i = at; i < hi; ++i) {
                const auto& ex = data[order[i]];
                const auto& cp = cache[order[i]];
                const int L = ex.inp.x_len;
                // One level per step: the prefix product up to the drawn
                // level masks the input, so every intermediate mask learns
                // to stay faithful and shallow gates keep live gradient
                // paths for the deeper ones.
                const int drawn =
                    static_cast<int>(noise_rng.uniform_int(static_cast<std::uint64_t>(stack.levels) + 1));
                Graph<S> g;
                const auto c0x = g.leaf(cp.acts_x[0]);

                typename Graph<S>::NodeId z_x{};
                typename Graph<S>::NodeId p_open{};
                for (int l = 0; l <= drawn; ++l) {
                    const auto la = detail::gate_scores(
                        g, stack, l, c0x, g.leaf(cp.acts_x[static_cast<std::size_t>(l)]));
                    // Stochastic stretched binary-concrete sample.
                    Tensor<S> noise(L, 1);
                    for (auto& v : noise.v) {
                        const double u = std::clamp(noise_rng.uniform(), 1e-12, 1.0 - 1e-12);
                        v = static_cast<S>(std::log(u) - std::log1p(-u));
                    }
                    const auto s = g.sigmoid(g.scale(g.add(la, g.leaf(std::move(noise))), inv_temp));
                    const auto v = g.hard_clamp01(g.affine(s, span, lo));
                    z_x = (l == 0) ? v : g.mul(z_x, v);
                    // Probability the rectified sample is nonzero, whose
                    // prefix product is the expected token keep-rate at the
                    // drawn level.
                    const auto open = g.sigmoid(g.affine(la, S(1), shift));
                    p_open = (l == 0) ? open : g.mul(p_open, open);
                }

                const auto z_full =
                    detail::pad_z(g, z_x, static_cast<int>(ex.inp.length()), L);
                typename ForwardOptions<S>::EmbedHook hook =
                    [&stack, z_full](Graph<S>& hg, typename Graph<S>::NodeId c0) {
                        return detail::apply_mask(hg, stack, c0, z_full);
                    };
                const auto enc =
                    method_forward(g, model, cfg, ex, eval_alpha(cfg), false, nullptr, &hook);
                const auto out = head_forward(g, model, cfg.head, enc, ex.inp);
                const auto div = cfg.head.kind == TaskHead::Kind::classification
                                     ? g.kl_to_reference(cp.ref, out)
                                     : g.squared_error(out, cp.ref);
                batch_div += static_cast<double>(g.val(div).v[0]);

                const auto objective =
                    g.add(g.scale(g.mean_all(p_open), static_cast<S>(dm.sparsity_weight)),
                          g.scale(div, static_cast<S>(stack.multiplier)));
                g.backward(g.scale(objective, inv_n));
            }
            adam.step(stack.params, dm.lr);
            stack.multiplier = std::clamp(
                stack.multiplier +
                    dm.multiplier_lr * (batch_div / static_cast<double>(hi - at) - dm.margin),
                0.0, dm.multiplier_max);
        }
    }
    model.zero_grad();
    return stack;
}

} // namespace knit
