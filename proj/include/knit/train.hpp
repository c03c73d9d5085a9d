// Fine-tuning harness: joint optimization of encoder + task head for the
// baseline and the four knowledge-integration methods, the fixed
// sweep/median experiment protocol, and dev-set evaluation.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/annotations.hpp"
#include "knit/assemble.hpp"
#include "knit/autodiff.hpp"
#include "knit/encoder.hpp"
#include "knit/kstore.hpp"
#include "knit/metrics.hpp"
#include "knit/optimizer.hpp"
#include "knit/rng.hpp"

namespace knit {

enum class Method { baseline, kt, kt_attn, kt_emb, kg_emb };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::baseline: return "baseline";
        case Method::kt: return "kt";
        case Method::kt_attn: return "kt-attn";
        case Method::kt_emb: return "kt-emb";
        case Method::kg_emb: return "kg-emb";
    }
    throw std::logic_error("unknown method");
}

inline Method parse_method(const std::string& name) {
    if (name == "baseline") return Method::baseline;
    if (name == "kt") return Method::kt;
    if (name == "kt-attn") return Method::kt_attn;
    if (name == "kt-emb") return Method::kt_emb;
    if (name == "kg-emb") return Method::kg_emb;
    throw std::invalid_argument("unknown method '" + name + "'");
}

// Appends description text to the input.
inline bool method_appends(Method m) { return m == Method::kt || m == Method::kt_attn; }
// Adds a projected entity vector onto anchor embeddings.
inline bool method_injects(Method m) { return m == Method::kt_emb || m == Method::kg_emb; }

struct RunConfig {
    Method method = Method::baseline;
    double lr = 2e-5;
    int batch_size = 32;
    int epochs = 3;
    double lambda_value = 0.2; // injection methods only
    std::uint64_t seed = 1;
    TaskHead head;
    MetricKind metric = MetricKind::accuracy;
    int max_len = 128;
    EncoderConfig enc;
    Layout layout = Layout::append;
    SelectionPolicy policy = SelectionPolicy::content_pos;
    // Restrict lr and lambda to the reproduction sweep grids.
    bool protocol_mode = false;
    // Freeze the description-encoding pass of the derived-vector method.
    bool stop_gradient_descriptions = false;
    double clip_norm = 0.0; // 0 = off
    double weight_decay = 0.0; // 0 = off (decoupled, applied with the step)
    double warmup_fraction = 0.06;

    void validate() const {
        enc.validate();
        if (lr <= 0) throw std::invalid_argument("run: learning rate must be positive");
        if (batch_size < 1 || epochs < 1)
            throw std::invalid_argument("run: batch size and epochs must be at least 1");
        if (lambda_value < 0.0 || lambda_value > 1.0)
            throw std::invalid_argument("run: lambda must lie in [0,1]");
        if (max_len < 4 || max_len > enc.max_positions)
            throw std::invalid_argument("run: max_len must lie in [4, max_positions]");
        if (protocol_mode) {
            const bool lr_ok = lr == 1e-5 || lr == 2e-5 || lr == 3e-5;
            if (!lr_ok)
                throw std::invalid_argument("run: protocol mode requires lr in {1e-5,2e-5,3e-5}");
            if (method_injects(method)) {
                const bool l_ok =
                    lambda_value == 0.1 || lambda_value == 0.2 || lambda_value == 0.3;
                if (!l_ok)
                    throw std::invalid_argument(
                        "run: protocol mode requires lambda in {0.1,0.2,0.3}");
            }
        }
        if (method == Method::kt_attn && layout != Layout::append)
            throw std::invalid_argument("run: the visibility-mask method requires append layout");
        if (head.kind == TaskHead::Kind::sequence_labeling && layout != Layout::append)
            throw std::invalid_argument("run: sequence labeling requires append layout");
        const bool metric_ok =
            (metric == MetricKind::accuracy && head.kind == TaskHead::Kind::classification) ||
            (metric == MetricKind::matthews && head.kind == TaskHead::Kind::classification &&
             head.classes == 2) ||
            (metric == MetricKind::pearson && head.kind == TaskHead::Kind::regression) ||
            (metric == MetricKind::span_f1 && head.kind == TaskHead::Kind::sequence_labeling);
        if (!metric_ok) throw std::invalid_argument("run: metric does not fit the task head");
    }
};

struct RunReport {
    std::vector<double> epoch_train_loss;
    double dev_metric = 0.0;
    bool dev_metric_degenerate = false;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
    long dropped_descriptions = 0;
    long unresolved_entities = 0;
    // Injection weight recorded before every optimizer step plus once after
    // the last; empty for methods without injection.
    std::vector<double> alpha_trace;
};

// Maps text/tag labels to class indices; fixed by the training split.
struct LabelCodec {
    std::vector<std::string> names;
    std::map<std::string, int> index;

    int id_of(const std::string& name) const {
        const auto it = index.find(name);
        if (it == index.end())
            throw std::invalid_argument("labels: '" + name + "' never seen in training data");
        return it->second;
    }
};

inline LabelCodec build_label_codec(const std::vector<AnnotatedRecord>& train,
                                    const TaskHead& head) {
    LabelCodec codec;
    std::set<std::string> seen;
    for (const auto& rec : train) {
        if (head.kind == TaskHead::Kind::sequence_labeling) {
            if (rec.label.kind != Label::Kind::tags)
                throw std::invalid_argument("labels: sequence labeling needs tag labels");
            for (const auto& t : rec.label.tags) seen.insert(t);
        } else if (head.kind == TaskHead::Kind::classification &&
                   rec.label.kind == Label::Kind::text) {
            seen.insert(rec.label.text);
        }
    }
    for (const auto& name : seen) {
        codec.index[name] = static_cast<int>(codec.names.size());
        codec.names.push_back(name);
    }
    if (head.kind == TaskHead::Kind::sequence_labeling &&
        static_cast<int>(codec.names.size()) > head.classes)
        throw std::invalid_argument("labels: more tag types than head classes");
    return codec;
}

// One dataset example, assembled for a specific method and ready for the
// forward pass.
struct PreparedExample {
    AssembledInput inp;
    bool has_mask = false;
    VisibilityMask mask;
    std::vector<int> anchors;                         // injection positions
    std::vector<const Description*> descriptions;     // one per anchor (derived vectors)
    std::vector<const std::vector<double>*> vectors;  // one per anchor (graph vectors)
    int gold_class = -1;
    double gold_value = 0.0;
    std::vector<int> gold_tags; // one per x token
    const AnnotatedRecord* source = nullptr;
};

inline PreparedExample prepare_example(const AnnotatedRecord& rec, const RunConfig& cfg,
                                       const KnowledgeStore& store, const LabelCodec& codec,
                                       RunReport* diag = nullptr) {
    PreparedExample ex;
    ex.source = &rec;
    TokenSequence seq = rec.seq;
    const auto selected = select_entities(rec.seq, cfg.policy);

    if (method_appends(cfg.method)) {
        seq.spans = selected;
        ex.inp = assemble(seq, store, cfg.layout, cfg.max_len);
        if (cfg.method == Method::kt_attn) {
            ex.mask = build_visibility_mask(ex.inp);
            ex.has_mask = true;
        }
    } else {
        seq.spans.clear(); // bare [CLS] x [SEP], no description text
        ex.inp = assemble(seq, store, Layout::append, cfg.max_len);
        if (method_injects(cfg.method)) {
            for (const auto& span : selected) {
                const auto hit = store.lookup(span.entity_id);
                if (cfg.method == Method::kt_emb && hit.description) {
                    ex.anchors.push_back(1 + span.p);
                    ex.descriptions.push_back(hit.description);
                } else if (cfg.method == Method::kg_emb && hit.embedding) {
                    ex.anchors.push_back(1 + span.p);
                    ex.vectors.push_back(hit.embedding);
                } else {
                    ex.inp.unresolved_entities.push_back(span.entity_id);
                }
            }
        }
    }
    if (diag) {
        diag->dropped_descriptions += ex.inp.dropped_descriptions;
        diag->unresolved_entities += static_cast<long>(ex.inp.unresolved_entities.size());
    }

    switch (cfg.head.kind) {
        case TaskHead::Kind::classification: {
            if (rec.label.kind == Label::Kind::text) {
                ex.gold_class = codec.id_of(rec.label.text);
            } else if (rec.label.kind == Label::Kind::number) {
                const double v = rec.label.number;
                if (v != std::floor(v) || v < 0 || v >= cfg.head.classes)
                    throw std::invalid_argument("labels: class index " + std::to_string(v) +
                                                " outside [0," + std::to_string(cfg.head.classes) +
                                                ")");
                ex.gold_class = static_cast<int>(v);
            } else {
                throw std::invalid_argument("labels: classification needs a number or text label");
            }
            break;
        }
        case TaskHead::Kind::regression: {
            if (rec.label.kind != Label::Kind::number)
                throw std::invalid_argument("labels: regression needs a numeric label");
            ex.gold_value = rec.label.number;
            break;
        }
        case TaskHead::Kind::sequence_labeling: {
            if (rec.label.kind != Label::Kind::tags)
                throw std::invalid_argument("labels: sequence labeling needs tag labels");
            if (static_cast<int>(rec.label.tags.size()) != ex.inp.x_len)
                throw std::invalid_argument("labels: tag count does not match kept x tokens");
            for (const auto& t : rec.label.tags) ex.gold_tags.push_back(codec.id_of(t));
            break;
        }
    }
    return ex;
}

inline std::vector<PreparedExample> prepare_examples(const std::vector<AnnotatedRecord>& records,
                                                     const RunConfig& cfg,
                                                     const KnowledgeStore& store,
                                                     const LabelCodec& codec,
                                                     RunReport* diag = nullptr) {
    std::vector<PreparedExample> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back(prepare_example(rec, cfg, store, codec, diag));
    return out;
}

// Full method-aware forward pass of one example: appended text comes in via
// the prepared input, the visibility mask via options, and entity vectors
// via embedding injection. Returns the whole residual stream.
template <typename S>
EncoderOut<S> method_forward(Graph<S>& g, ParamStore<S>& ps, const RunConfig& cfg,
                             const PreparedExample& ex, double alpha, bool train_mode,
                             RngStream* dropout_rng,
                             const typename ForwardOptions<S>::EmbedHook* embed_hook = nullptr) {
    ForwardOptions<S> opt;
    opt.train_mode = train_mode;
    opt.dropout_rng = dropout_rng;
    opt.embed_hook = embed_hook;
    if (ex.has_mask) opt.mask = &ex.mask;

    Injection<S> inj;
    if (method_injects(cfg.method) && !ex.anchors.empty() && alpha != 0.0) {
        if (cfg.method == Method::kg_emb) {
            Tensor<S> h(static_cast<int>(ex.vectors.size()),
                        static_cast<int>(ex.vectors.front()->size()));
            for (std::size_t i = 0; i < ex.vectors.size(); ++i)
                for (std::size_t d = 0; d < ex.vectors[i]->size(); ++d)
                    h.at(static_cast<int>(i), static_cast<int>(d)) =
                        static_cast<S>((*ex.vectors[i])[d]);
            inj.h = g.leaf(std::move(h)); // pre-trained graph vectors stay frozen
        } else {
            std::vector<typename Graph<S>::NodeId> rows;
            for (const auto* d : ex.descriptions)
                rows.push_back(
                    derive_kt_emb(g, ps, cfg.enc, d->ids, cfg.stop_gradient_descriptions));
            inj.h = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
        }
        inj.anchors = ex.anchors;
        inj.alpha = alpha;
        opt.injection = &inj;
    }
    return encoder_forward(g, ps, cfg.enc, ex.inp, opt);
}

// Forward pass of one example under the configured method; returns the head
// output node (logits or regression value).
template <typename S>
typename Graph<S>::NodeId forward_example(Graph<S>& g, ParamStore<S>& ps, const RunConfig& cfg,
                                          const PreparedExample& ex, double alpha, bool train_mode,
                                          RngStream* dropout_rng) {
    const auto out = method_forward(g, ps, cfg, ex, alpha, train_mode, dropout_rng);
    return head_forward(g, ps, cfg.head, out, ex.inp);
}

// Injection weight of a finished run: annealing ends at lambda, so analysis
// and evaluation read the model at that operating point.
inline double eval_alpha(const RunConfig& cfg) {
    return method_injects(cfg.method) ? cfg.lambda_value : 0.0;
}

template <typename S>
typename Graph<S>::NodeId example_loss(Graph<S>& g, typename Graph<S>::NodeId head_out,
                                       const RunConfig& cfg, const PreparedExample& ex) {
    switch (cfg.head.kind) {
        case TaskHead::Kind::classification:
            return g.softmax_cross_entropy(head_out, {ex.gold_class});
        case TaskHead::Kind::sequence_labeling:
            return g.softmax_cross_entropy(head_out, ex.gold_tags);
        case TaskHead::Kind::regression: {
            Tensor<S> target(1, 1);
            target.at(0, 0) = static_cast<S>(ex.gold_value);
            return g.squared_error(head_out, std::move(target));
        }
    }
    throw std::logic_error("unknown head kind");
}

namespace detail {

template <typename S>
void clip_gradients(ParamStore<S>& ps, double clip_norm) {
    double total = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (const S gval : ps.at(i).grad.v) total += static_cast<double>(gval) * gval;
    total = std::sqrt(total);
    if (total <= clip_norm) return;
    const S factor = static_cast<S>(clip_norm / total);
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (S& gval : ps.at(i).grad.v) gval *= factor;
}

template <typename T>
int argmax_row(const Tensor<T>& t, int row) {
    int best = 0;
    for (int j = 1; j < t.cols(); ++j)
        if (t.at(row, j) > t.at(row, best)) best = j;
    return best;
}

} // namespace detail

// Dev-set evaluation in eval mode (no dropout) at a fixed injection weight.
template <typename S>
MetricResult evaluate(const RunConfig& cfg, ParamStore<S>& ps,
                      const std::vector<PreparedExample>& examples, const LabelCodec& codec,
                      double alpha) {
    std::vector<int> pred_ids, gold_ids;
    std::vector<double> pred_vals, gold_vals;
    std::vector<std::vector<std::string>> pred_tags, gold_tags;
    for (const auto& ex : examples) {
        Graph<S> g;
        const auto out = forward_example(g, ps, cfg, ex, alpha, false, nullptr);
        const auto& t = g.val(out);
        switch (cfg.head.kind) {
            case TaskHead::Kind::classification:
                pred_ids.push_back(detail::argmax_row(t, 0));
                gold_ids.push_back(ex.gold_class);
                break;
            case TaskHead::Kind::regression:
                pred_vals.push_back(static_cast<double>(t.at(0, 0)));
                gold_vals.push_back(ex.gold_value);
                break;
            case TaskHead::Kind::sequence_labeling: {
                std::vector<std::string> p, q;
                for (int r = 0; r < t.rows(); ++r) {
                    p.push_back(codec.names.at(
                        static_cast<std::size_t>(detail::argmax_row(t, r))));
                    q.push_back(codec.names.at(
                        static_cast<std::size_t>(ex.gold_tags[static_cast<std::size_t>(r)])));
                }
                pred_tags.push_back(std::move(p));
                gold_tags.push_back(std::move(q));
                break;
            }
        }
    }
    switch (cfg.metric) {
        case MetricKind::accuracy: return metric_accuracy(pred_ids, gold_ids);
        case MetricKind::matthews: return metric_matthews(pred_ids, gold_ids);
        case MetricKind::pearson: return metric_pearson(pred_vals, gold_vals);
        case MetricKind::span_f1: return metric_span_f1(pred_tags, gold_tags);
    }
    throw std::logic_error("unknown metric kind");
}

template <typename S>
struct FinetuneOutcome {
    ParamStore<S> params;
    RunReport report;
    LabelCodec codec;
};

// Joint fine-tuning of encoder, projection, and head under the configured
// method. Deterministic for a fixed config + seed; a non-finite loss aborts
// with the offending optimizer-step index.
template <typename S = float>
FinetuneOutcome<S> finetune(const RunConfig& cfg, const std::vector<AnnotatedRecord>& train,
                            const std::vector<AnnotatedRecord>& dev, const KnowledgeStore& store) {
    cfg.validate();
    if (train.empty() || dev.empty())
        throw std::invalid_argument("finetune: datasets must be non-empty");
    if ((method_appends(cfg.method) || cfg.method == Method::kt_emb) &&
        store.description_count() == 0)
        throw std::invalid_argument("finetune: method needs a loaded description store");
    if (cfg.method == Method::kg_emb && store.embedding_count() == 0)
        throw std::invalid_argument("finetune: method needs loaded entity embeddings");

    const auto t0 = std::chrono::steady_clock::now();
    FinetuneOutcome<S> out;
    out.report.seed = cfg.seed;
    out.codec = build_label_codec(train, cfg.head);
    const auto train_ex = prepare_examples(train, cfg, store, out.codec, &out.report);
    const auto dev_ex = prepare_examples(dev, cfg, store, out.codec);

    auto& ps = out.params;
    init_encoder_params(ps, cfg.enc, cfg.seed);
    if (method_injects(cfg.method)) {
        const int in_dim =
            cfg.method == Method::kg_emb ? store.embedding_dim() : cfg.enc.d_model;
        if (in_dim < 1) throw std::invalid_argument("finetune: store has no embedding dimension");
        init_projection_params(ps, in_dim, cfg.enc, cfg.seed);
    }
    init_head_params(ps, cfg.enc, cfg.head, cfg.seed);

    const long n = static_cast<long>(train_ex.size());
    const long batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs) * batches;
    const AnnealSchedule sched{cfg.lambda_value, total_steps};
    const bool injecting = method_injects(cfg.method);

    RngStream shuffle_rng(cfg.seed, "shuffle");
    RngStream dropout_rng(cfg.seed, "dropout");
    AdamOptimizer<S> adam;
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::size_t{0});

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (long b = 0; b < batches; ++b) {
            const long lo = b * cfg.batch_size;
            const long hi = std::min(n, lo + cfg.batch_size);
            const double alpha = injecting ? anneal_alpha(step, sched) : 0.0;
            if (injecting) out.report.alpha_trace.push_back(alpha);
            ps.zero_grad();
            for (long i = lo; i < hi; ++i) {
                const auto& ex = train_ex[order[static_cast<std::size_t>(i)]];
                Graph<S> g;
                // Numerical failures mid-training (non-finite loss, or a
                // blow-up that breaks an op before the loss is even reached)
                // report the offending optimizer step.
                try {
                    const auto logits = forward_example(g, ps, cfg, ex, alpha, true, &dropout_rng);
                    const auto loss = example_loss(g, logits, cfg, ex);
                    const double lv = static_cast<double>(g.val(loss).v[0]);
                    if (!std::isfinite(lv)) throw std::runtime_error("non-finite loss");
                    epoch_loss += lv;
                    g.backward(g.scale(loss, static_cast<S>(1.0 / static_cast<double>(hi - lo))));
                } catch (const std::runtime_error& e) {
                    throw std::runtime_error("finetune: diverged at step " +
                                             std::to_string(step) + ": " + e.what());
                }
            }
            if (cfg.clip_norm > 0) detail::clip_gradients(ps, cfg.clip_norm);
            const double lr = scheduled_lr(cfg.lr, step, total_steps, cfg.warmup_fraction);
            if (cfg.weight_decay > 0)
                for (std::size_t p = 0; p < ps.size(); ++p)
                    for (S& v : ps.at(p).value.v)
                        v -= static_cast<S>(lr * cfg.weight_decay) * v;
            adam.step(ps, lr);
            ++step;
        }
        out.report.epoch_train_loss.push_back(epoch_loss / static_cast<double>(n));
    }
    if (injecting) out.report.alpha_trace.push_back(anneal_alpha(total_steps, sched));

    const auto m = evaluate(cfg, ps, dev_ex, out.codec, eval_alpha(cfg));
    out.report.dev_metric = m.value;
    out.report.dev_metric_degenerate = m.degenerate;
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

inline double median_of_five(std::vector<double> v) {
    if (v.size() != 5) throw std::invalid_argument("median: exactly five values required");
    std::sort(v.begin(), v.end());
    return v[2]; // 3rd order statistic
}

struct SeedRun {
    std::uint64_t seed = 0;
    RunReport report;
};

struct SweepOutcome {
    double median_metric = 0.0;
    std::vector<SeedRun> runs;
};

// Runs the same configuration under each seed and reports the median dev
// metric; any failing run propagates its exception.
template <typename S = float>
SweepOutcome median_over_seeds(RunConfig cfg, const std::vector<std::uint64_t>& seeds,
                               const std::vector<AnnotatedRecord>& train,
                               const std::vector<AnnotatedRecord>& dev,
                               const KnowledgeStore& store) {
    if (seeds.size() != 5)
        throw std::invalid_argument("median_over_seeds: exactly five seeds required");
    SweepOutcome out;
    std::vector<double> metrics;
    for (const auto seed : seeds) {
        cfg.seed = seed;
        auto result = finetune<S>(cfg, train, dev, store);
        metrics.push_back(result.report.dev_metric);
        out.runs.push_back({seed, std::move(result.report)});
    }
    out.median_metric = median_of_five(metrics);
    return out;
}

// Training-curve CSV: one row per epoch.
inline void write_run_report_csv(const RunReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("report: cannot open for write: " + path);
    char buf[64];
    os << "epoch,train_loss\n";
    for (std::size_t e = 0; e < report.epoch_train_loss.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%.17g", report.epoch_train_loss[e]);
        os << (e + 1) << "," << buf << "\n";
    }
}

} // namespace knit
