// Experiment plans and the three command entry points: grid sweeps with
// per-method median summaries and checkpoints, synthetic corpus generation,
// and checkpoint analysis (layer probing, gate masking, mask dumps).
//
// Plan and spec files are flat key=value text: '#' starts a comment, blank
// lines are skipped, keys may not repeat, unknown keys are errors. Every
// command writes byte-identical artifacts when rerun on identical inputs,
// and no command mutates its input files.
#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "knit/checkpoint.hpp"
#include "knit/diffmask.hpp"
#include "knit/probes.hpp"
#include "knit/report.hpp"
#include "knit/synth.hpp"
#include "knit/train.hpp"

namespace knit {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("plan: cannot open: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
        if (kv.count(key))
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate key '" +
                                     key + "'");
        kv[key] = val;
    }
    return kv;
}

// Consumes a key so leftovers can be flagged as unknown.
inline bool take(std::map<std::string, std::string>& kv, const std::string& key,
                 std::string& out) {
    const auto it = kv.find(key);
    if (it == kv.end()) return false;
    out = it->second;
    kv.erase(it);
    return true;
}

inline std::string take_required(std::map<std::string, std::string>& kv, const std::string& key) {
    std::string v;
    if (!take(kv, key, v)) throw std::invalid_argument("plan: missing key '" + key + "'");
    return v;
}

inline double to_double(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
        throw std::invalid_argument(what + ": not a number: '" + s + "'");
    return v;
}

inline long long to_int(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size())
        throw std::invalid_argument(what + ": not an integer: '" + s + "'");
    return v;
}

inline std::uint64_t to_u64(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || s[0] == '-' || end != s.c_str() + s.size())
        throw std::invalid_argument(what + ": not an unsigned integer: '" + s + "'");
    return v;
}

inline bool to_bool(const std::string& s, const std::string& what) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument(what + ": expected true or false: '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s, const std::string& what) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const auto item = trim(s.substr(pos, comma == std::string::npos ? comma : comma - pos));
        if (item.empty()) throw std::invalid_argument(what + ": empty list item");
        out.push_back(item);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw std::invalid_argument(what + ": empty list");
    return out;
}

inline std::string join(const std::vector<std::string>& items, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

inline std::string task_name(TaskHead::Kind k) {
    switch (k) {
        case TaskHead::Kind::classification: return "classification";
        case TaskHead::Kind::regression: return "regression";
        case TaskHead::Kind::sequence_labeling: return "sequence_labeling";
    }
    throw std::logic_error("unknown task kind");
}

inline TaskHead::Kind parse_task(const std::string& name) {
    if (name == "classification") return TaskHead::Kind::classification;
    if (name == "regression") return TaskHead::Kind::regression;
    if (name == "sequence_labeling") return TaskHead::Kind::sequence_labeling;
    throw std::invalid_argument("plan: unknown task '" + name + "'");
}

inline Layout parse_layout(const std::string& name) {
    if (name == "append") return Layout::append;
    if (name == "insert_after") return Layout::insert_after;
    throw std::invalid_argument("plan: unknown layout '" + name + "'");
}

inline SelectionPolicy parse_policy(const std::string& name) {
    if (name == "content_pos") return SelectionPolicy::content_pos;
    if (name == "linker_provided") return SelectionPolicy::linker_provided;
    throw std::invalid_argument("plan: unknown policy '" + name + "'");
}

// Runs fn(0..n-1) on up to `workers` threads; each index runs exactly once
// unless an earlier failure aborts the remainder. The failure with the
// lowest index is rethrown so error reports are deterministic.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers < 1) throw std::invalid_argument("workers must be at least 1");
    std::vector<std::exception_ptr> errors(n);
    if (workers == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::atomic<bool> abort{false};
        auto worker = [&] {
            while (!abort.load()) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                    abort.store(true);
                }
            }
        };
        std::vector<std::thread> pool;
        const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
        pool.reserve(count);
        for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

// ---- Experiment plans ----------------------------------------------------

struct ExperimentPlan {
    TaskHead head;
    MetricKind metric = MetricKind::accuracy;
    std::vector<Method> methods;
    std::vector<double> lrs;
    std::vector<double> lambdas; // used only by methods with injection
    std::vector<std::uint64_t> seeds;
    std::string train_path;
    std::string dev_path;
    std::string dictionary_path; // required when a method reads descriptions
    std::string embeddings_path; // required when a method reads graph vectors
    std::string out_dir;
    int epochs = 3;
    int batch_size = 32;
    int max_len = 64;
    EncoderConfig enc; // vocab_size is derived from the corpus at run time
    Layout layout = Layout::append;
    SelectionPolicy policy = SelectionPolicy::content_pos;
    bool protocol_mode = false;
    bool stop_gradient_descriptions = false;

    bool needs_dictionary() const {
        for (const auto m : methods)
            if (method_appends(m) || m == Method::kt_emb) return true;
        return false;
    }

    bool needs_embeddings() const {
        for (const auto m : methods)
            if (m == Method::kg_emb) return true;
        return false;
    }

    bool has_injection() const {
        for (const auto m : methods)
            if (method_injects(m)) return true;
        return false;
    }

    // Input files are checked before the output directory is prepared, so a
    // broken plan fails before anything is created or trained.
    void validate() const {
        if (methods.empty()) throw std::invalid_argument("plan: no methods listed");
        std::set<Method> mseen;
        for (const auto m : methods)
            if (!mseen.insert(m).second)
                throw std::invalid_argument("plan: duplicate method '" + method_name(m) + "'");
        if (lrs.empty()) throw std::invalid_argument("plan: no learning rates listed");
        for (const double lr : lrs)
            if (lr <= 0) throw std::invalid_argument("plan: learning rates must be positive");
        if (has_injection() && lambdas.empty())
            throw std::invalid_argument("plan: methods with injection need a lambda grid");
        for (const double l : lambdas)
            if (l < 0.0 || l > 1.0) throw std::invalid_argument("plan: lambda must lie in [0,1]");
        if (seeds.size() != 5)
            throw std::invalid_argument("plan: exactly five seeds required for the median");
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
            throw std::invalid_argument("plan: seeds must be distinct");
        if (protocol_mode) {
            for (const double lr : lrs)
                if (lr != 1e-5 && lr != 2e-5 && lr != 3e-5)
                    throw std::invalid_argument(
                        "plan: protocol mode requires lr in {1e-5,2e-5,3e-5}");
            if (has_injection())
                for (const double l : lambdas)
                    if (l != 0.1 && l != 0.2 && l != 0.3)
                        throw std::invalid_argument(
                            "plan: protocol mode requires lambda in {0.1,0.2,0.3}");
        }

        if (epochs < 1 || batch_size < 1)
            throw std::invalid_argument("plan: epochs and batch must be at least 1");
        if (enc.layers < 1 || enc.heads < 1 || enc.ff < 1 || enc.d_model % enc.heads != 0)
            throw std::invalid_argument("plan: bad encoder shape");
        if (enc.dropout < 0.0 || enc.dropout >= 1.0)
            throw std::invalid_argument("plan: dropout must lie in [0,1)");
        if (max_len < 4 || max_len > enc.max_positions)
            throw std::invalid_argument("plan: max_len must lie in [4, max_positions]");
        const bool metric_ok =
            (metric == MetricKind::accuracy && head.kind == TaskHead::Kind::classification) ||
            (metric == MetricKind::matthews && head.kind == TaskHead::Kind::classification &&
             head.classes == 2) ||
            (metric == MetricKind::pearson && head.kind == TaskHead::Kind::regression) ||
            (metric == MetricKind::span_f1 && head.kind == TaskHead::Kind::sequence_labeling);
        if (!metric_ok) throw std::invalid_argument("plan: metric does not fit the task");

        namespace fs = std::filesystem;
        auto check_file = [](const std::string& path, const std::string& what) {
            if (path.empty()) throw std::invalid_argument("plan: missing " + what + " path");
            if (!fs::is_regular_file(path))
                throw std::invalid_argument("plan: " + what + " file not found: " + path);
        };
        check_file(train_path, "train");
        check_file(dev_path, "dev");
        if (needs_dictionary() || !dictionary_path.empty())
            check_file(dictionary_path, "dictionary");
        if (needs_embeddings() || !embeddings_path.empty())
            check_file(embeddings_path, "embeddings");

        if (out_dir.empty()) throw std::invalid_argument("plan: missing out path");
        fs::create_directories(out_dir);
        const auto probe = fs::path(out_dir) / ".write_probe";
        {
            std::ofstream os(probe, std::ios::trunc);
            if (!(os << "ok")) throw std::runtime_error("plan: out dir not writable: " + out_dir);
        }
        fs::remove(probe);
    }
};

inline ExperimentPlan parse_plan(const std::string& path) {
    auto kv = detail::read_kv_file(path);
    ExperimentPlan plan;
    std::string v;

    plan.head.kind = detail::parse_task(detail::take_required(kv, "task"));
    if (plan.head.kind == TaskHead::Kind::regression) {
        plan.head.classes = 1;
        if (detail::take(kv, "classes", v))
            throw std::invalid_argument("plan: regression takes no classes key");
    } else {
        plan.head.classes =
            static_cast<int>(detail::to_int(detail::take_required(kv, "classes"), "plan: classes"));
        if (plan.head.classes < 2) throw std::invalid_argument("plan: need at least two classes");
    }
    plan.metric = parse_metric(detail::take_required(kv, "metric"));

    for (const auto& name : detail::split_list(detail::take_required(kv, "methods"), "plan: methods"))
        plan.methods.push_back(parse_method(name));
    for (const auto& s : detail::split_list(detail::take_required(kv, "lrs"), "plan: lrs"))
        plan.lrs.push_back(detail::to_double(s, "plan: lrs"));
    if (detail::take(kv, "lambdas", v))
        for (const auto& s : detail::split_list(v, "plan: lambdas"))
            plan.lambdas.push_back(detail::to_double(s, "plan: lambdas"));
    for (const auto& s : detail::split_list(detail::take_required(kv, "seeds"), "plan: seeds"))
        plan.seeds.push_back(detail::to_u64(s, "plan: seeds"));

    plan.train_path = detail::take_required(kv, "train");
    plan.dev_path = detail::take_required(kv, "dev");
    detail::take(kv, "dictionary", plan.dictionary_path);
    detail::take(kv, "embeddings", plan.embeddings_path);
    plan.out_dir = detail::take_required(kv, "out");

    if (detail::take(kv, "epochs", v))
        plan.epochs = static_cast<int>(detail::to_int(v, "plan: epochs"));
    if (detail::take(kv, "batch", v))
        plan.batch_size = static_cast<int>(detail::to_int(v, "plan: batch"));
    if (detail::take(kv, "max_len", v))
        plan.max_len = static_cast<int>(detail::to_int(v, "plan: max_len"));

    plan.enc.d_model = 64;
    plan.enc.layers = 2;
    plan.enc.heads = 2;
    plan.enc.ff = 128;
    plan.enc.dropout = 0.1;
    plan.enc.max_positions = 256;
    if (detail::take(kv, "d_model", v))
        plan.enc.d_model = static_cast<int>(detail::to_int(v, "plan: d_model"));
    if (detail::take(kv, "layers", v))
        plan.enc.layers = static_cast<int>(detail::to_int(v, "plan: layers"));
    if (detail::take(kv, "heads", v))
        plan.enc.heads = static_cast<int>(detail::to_int(v, "plan: heads"));
    if (detail::take(kv, "ff", v)) plan.enc.ff = static_cast<int>(detail::to_int(v, "plan: ff"));
    if (detail::take(kv, "dropout", v)) plan.enc.dropout = detail::to_double(v, "plan: dropout");
    if (detail::take(kv, "max_positions", v))
        plan.enc.max_positions = static_cast<int>(detail::to_int(v, "plan: max_positions"));

    if (detail::take(kv, "layout", v)) plan.layout = detail::parse_layout(v);
    if (detail::take(kv, "policy", v)) plan.policy = detail::parse_policy(v);
    if (detail::take(kv, "protocol", v)) plan.protocol_mode = detail::to_bool(v, "plan: protocol");
    if (detail::take(kv, "stop_gradient", v))
        plan.stop_gradient_descriptions = detail::to_bool(v, "plan: stop_gradient");

    if (!kv.empty()) throw std::invalid_argument("plan: unknown key '" + kv.begin()->first + "'");
    plan.validate();
    return plan;
}

// ---- Sweep execution -----------------------------------------------------

struct SweepRow {
    Method method = Method::baseline;
    double lr = 0.0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double metric = 0.0;
    bool degenerate = false;
};

struct SummaryRow {
    Method method = Method::baseline;
    double median = 0.0;
    double lr = 0.0;    // grid point the median comes from
    double lambda = 0.0;
};

struct RunOutputs {
    std::vector<SweepRow> rows;       // grid order: method, lr, lambda, seed
    std::vector<SummaryRow> summary;  // plan method order, best grid point each
};

namespace detail {

inline RunConfig plan_config(const ExperimentPlan& plan, Method m, double lr, double lambda,
                             std::uint64_t seed, int vocab_size) {
    RunConfig cfg;
    cfg.method = m;
    cfg.lr = lr;
    cfg.lambda_value = lambda;
    cfg.seed = seed;
    cfg.epochs = plan.epochs;
    cfg.batch_size = plan.batch_size;
    cfg.max_len = plan.max_len;
    cfg.head = plan.head;
    cfg.metric = plan.metric;
    cfg.enc = plan.enc;
    cfg.enc.vocab_size = vocab_size;
    cfg.layout = plan.layout;
    cfg.policy = plan.policy;
    cfg.protocol_mode = plan.protocol_mode;
    cfg.stop_gradient_descriptions = plan.stop_gradient_descriptions;
    return cfg;
}

// Vocabulary over both splits plus every dictionary line (surface +
// definition + the joining colon), mirroring the synthetic-corpus recipe so
// checkpoints can rebuild the identical token table from the same files.
inline Vocabulary corpus_vocabulary(const std::string& train_path, const std::string& dev_path,
                                    const std::string& dictionary_path) {
    std::vector<std::string> lines;
    for (const std::string* p : {&train_path, &dev_path})
        for (const auto& rec : load_annotations(*p)) lines.push_back(rec.text);
    if (!dictionary_path.empty()) {
        std::ifstream is(dictionary_path);
        if (!is) throw std::runtime_error("plan: cannot open: " + dictionary_path);
        std::string line;
        while (std::getline(is, line)) {
            for (auto& c : line)
                if (c == '\t') c = ' ';
            const auto sp = line.find(' ');
            if (sp != std::string::npos) lines.push_back(line.substr(sp + 1) + " :");
        }
    }
    return build_vocab(lines, 1);
}

inline std::string unit_label(Method m, double lr, double lambda, std::uint64_t seed) {
    return "method=" + method_name(m) + " lr=" + fmtg(lr) + " lambda=" + fmtg(lambda) +
           " seed=" + std::to_string(seed);
}

inline std::string run_csv_name(Method m, double lr, double lambda, std::uint64_t seed) {
    return "run_" + method_name(m) + "_lr" + fmtg(lr) + "_lam" + fmtg(lambda) + "_seed" +
           std::to_string(seed) + ".csv";
}

inline std::map<std::string, std::string> checkpoint_meta(const ExperimentPlan& plan,
                                                          const RunConfig& cfg,
                                                          const LabelCodec& codec,
                                                          double dev_metric) {
    std::map<std::string, std::string> kv;
    kv["task"] = task_name(cfg.head.kind);
    kv["classes"] = std::to_string(cfg.head.classes);
    kv["metric"] = metric_name(cfg.metric);
    kv["method"] = method_name(cfg.method);
    kv["lr"] = fmt17(cfg.lr);
    kv["lambda"] = fmt17(cfg.lambda_value);
    kv["seed"] = std::to_string(cfg.seed);
    kv["epochs"] = std::to_string(cfg.epochs);
    kv["batch"] = std::to_string(cfg.batch_size);
    kv["max_len"] = std::to_string(cfg.max_len);
    kv["layout"] = cfg.layout == Layout::append ? "append" : "insert_after";
    kv["policy"] =
        cfg.policy == SelectionPolicy::content_pos ? "content_pos" : "linker_provided";
    kv["protocol"] = cfg.protocol_mode ? "1" : "0";
    kv["stop_gradient"] = cfg.stop_gradient_descriptions ? "1" : "0";
    kv["d_model"] = std::to_string(cfg.enc.d_model);
    kv["layers"] = std::to_string(cfg.enc.layers);
    kv["heads"] = std::to_string(cfg.enc.heads);
    kv["ff"] = std::to_string(cfg.enc.ff);
    kv["dropout"] = fmt17(cfg.enc.dropout);
    kv["max_positions"] = std::to_string(cfg.enc.max_positions);
    kv["vocab_size"] = std::to_string(cfg.enc.vocab_size);
    kv["train"] = plan.train_path;
    kv["dev"] = plan.dev_path;
    kv["dictionary"] = plan.dictionary_path;
    kv["embeddings"] = plan.embeddings_path;
    kv["labels"] = join(codec.names, ",");
    kv["dev_metric"] = fmt17(dev_metric);
    return kv;
}

} // namespace detail

// Executes the full method × lr × lambda × seed grid, then writes, under the
// plan's out directory: sweep.csv (every run), one training-curve CSV per
// run, summary.csv (per-method median at its best grid point), and one
// checkpoint per method retrained at the seed that produced the median.
inline RunOutputs cmd_run(const ExperimentPlan& plan, int workers = 1) {
    plan.validate();

    const auto vocab =
        detail::corpus_vocabulary(plan.train_path, plan.dev_path, plan.dictionary_path);
    const auto train = load_annotations(plan.train_path, &vocab);
    const auto dev = load_annotations(plan.dev_path, &vocab);
    KnowledgeStore store;
    if (!plan.dictionary_path.empty()) store.read_dictionary(plan.dictionary_path, vocab);
    if (!plan.embeddings_path.empty()) store.read_embeddings(plan.embeddings_path);

    struct Unit {
        Method m;
        double lr, lambda;
        std::uint64_t seed;
    };
    struct GridPoint {
        double lr, lambda;
        std::size_t base; // first of five consecutive seed units
    };
    std::vector<Unit> units;
    std::vector<std::vector<GridPoint>> points(plan.methods.size());
    for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) {
        const Method m = plan.methods[mi];
        const auto lgrid =
            method_injects(m) ? plan.lambdas : std::vector<double>{0.0};
        for (const double lr : plan.lrs)
            for (const double lambda : lgrid) {
                points[mi].push_back({lr, lambda, units.size()});
                for (const auto seed : plan.seeds) units.push_back({m, lr, lambda, seed});
            }
    }

    std::vector<RunReport> reports(units.size());
    detail::parallel_for(units.size(), workers, [&](std::size_t i) {
        const auto& u = units[i];
        try {
            const auto cfg = detail::plan_config(plan, u.m, u.lr, u.lambda, u.seed, vocab.size());
            reports[i] = finetune<float>(cfg, train, dev, store).report;
        } catch (const std::exception& e) {
            throw std::runtime_error("run failed: " +
                                     detail::unit_label(u.m, u.lr, u.lambda, u.seed) + ": " +
                                     e.what());
        }
    });

    RunOutputs out;
    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto& u = units[i];
        out.rows.push_back({u.m, u.lr, u.lambda, u.seed, reports[i].dev_metric,
                            reports[i].dev_metric_degenerate});
        write_run_report_csv(reports[i],
                             plan.out_dir + "/" +
                                 detail::run_csv_name(u.m, u.lr, u.lambda, u.seed));
    }

    {
        auto os = detail::open_artifact(plan.out_dir + "/sweep.csv");
        os << "method,lr,lambda,seed,metric,degenerate\n";
        for (const auto& r : out.rows)
            os << method_name(r.method) << "," << detail::fmtg(r.lr) << ","
               << detail::fmtg(r.lambda) << "," << r.seed << "," << detail::fmt17(r.metric)
               << "," << (r.degenerate ? 1 : 0) << "\n";
    }

    for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) {
        SummaryRow best{plan.methods[mi], 0.0, 0.0, 0.0};
        bool first = true;
        std::size_t best_base = 0;
        for (const auto& gp : points[mi]) {
            std::vector<double> metrics;
            for (std::size_t k = 0; k < 5; ++k)
                metrics.push_back(reports[gp.base + k].dev_metric);
            const double med = median_of_five(metrics);
            if (first || med > best.median) {
                best.median = med;
                best.lr = gp.lr;
                best.lambda = gp.lambda;
                best_base = gp.base;
                first = false;
            }
        }
        out.summary.push_back(best);

        // Materialize the method's checkpoint: the seed whose run produced
        // the median at the best grid point, retrained deterministically.
        std::uint64_t median_seed = plan.seeds.front();
        for (std::size_t k = 0; k < 5; ++k)
            if (reports[best_base + k].dev_metric == best.median) {
                median_seed = plan.seeds[k];
                break;
            }
        const auto cfg = detail::plan_config(plan, best.method, best.lr, best.lambda, median_seed,
                                             vocab.size());
        auto trained = finetune<float>(cfg, train, dev, store);
        const std::string ckpt = plan.out_dir + "/" + method_name(best.method) + ".ckpt";
        save_checkpoint(ckpt, trained.params);
        save_meta(ckpt + ".meta",
                  detail::checkpoint_meta(plan, cfg, trained.codec, trained.report.dev_metric));
    }

    {
        auto os = detail::open_artifact(plan.out_dir + "/summary.csv");
        os << "method,metric,median,lr,lambda\n";
        for (const auto& s : out.summary)
            os << method_name(s.method) << "," << metric_name(plan.metric) << ","
               << detail::fmt17(s.median) << "," << detail::fmtg(s.lr) << ","
               << detail::fmtg(s.lambda) << "\n";
    }
    return out;
}

inline RunOutputs cmd_run(const std::string& plan_path, int workers = 1) {
    return cmd_run(parse_plan(plan_path), workers);
}

// ---- Synthetic corpus generation ------------------------------------------

// Reads a key=value spec (all keys optional), generates the corpus triple
// into out_dir, and re-audits the written files before returning.
inline SynthData cmd_gen_synth(const std::string& spec_path, const std::string& out_dir) {
    auto kv = detail::read_kv_file(spec_path);
    SynthSpec spec;
    std::string v;
    if (detail::take(kv, "train", v))
        spec.train_sentences = static_cast<int>(detail::to_int(v, "synth spec: train"));
    if (detail::take(kv, "dev", v))
        spec.dev_sentences = static_cast<int>(detail::to_int(v, "synth spec: dev"));
    if (detail::take(kv, "train_entities", v))
        spec.train_entities = static_cast<int>(detail::to_int(v, "synth spec: train_entities"));
    if (detail::take(kv, "dev_entities", v))
        spec.dev_entities = static_cast<int>(detail::to_int(v, "synth spec: dev_entities"));
    if (detail::take(kv, "sentence_length", v))
        spec.sentence_length = static_cast<int>(detail::to_int(v, "synth spec: sentence_length"));
    if (detail::take(kv, "embed_dim", v))
        spec.embed_dim = static_cast<int>(detail::to_int(v, "synth spec: embed_dim"));
    if (detail::take(kv, "attribute_dims", v))
        spec.attribute_dims = static_cast<int>(detail::to_int(v, "synth spec: attribute_dims"));
    if (detail::take(kv, "max_distractors", v))
        spec.max_distractors = static_cast<int>(detail::to_int(v, "synth spec: max_distractors"));
    if (detail::take(kv, "seed", v)) spec.seed = detail::to_u64(v, "synth spec: seed");
    if (!kv.empty())
        throw std::invalid_argument("synth spec: unknown key '" + kv.begin()->first + "'");
    spec.validate();

    std::filesystem::create_directories(out_dir);
    auto data = generate_synthetic(spec);
    write_synthetic(data, out_dir);
    audit_synthetic(out_dir);
    return data;
}

// ---- Checkpoint analysis ---------------------------------------------------

namespace detail {

struct CheckpointBundle {
    RunConfig cfg;
    Vocabulary vocab;
    KnowledgeStore store;
    LabelCodec codec;
    ParamStore<float> params;
    std::vector<AnnotatedRecord> dev;
};

inline const std::string& meta_need(const std::map<std::string, std::string>& kv,
                                    const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("meta: missing key '" + key + "'");
    return it->second;
}

// Rebuilds everything a checkpoint needs from its sidecar metadata: the run
// configuration, the identical vocabulary (re-derived from the same corpus
// files), the knowledge store, the label codec, and the dev records.
inline CheckpointBundle load_bundle(const std::string& ckpt_path) {
    const auto kv = load_meta(ckpt_path + ".meta");
    CheckpointBundle b;

    auto& cfg = b.cfg;
    cfg.method = parse_method(meta_need(kv, "method"));
    cfg.lr = to_double(meta_need(kv, "lr"), "meta: lr");
    cfg.lambda_value = to_double(meta_need(kv, "lambda"), "meta: lambda");
    cfg.seed = to_u64(meta_need(kv, "seed"), "meta: seed");
    cfg.epochs = static_cast<int>(to_int(meta_need(kv, "epochs"), "meta: epochs"));
    cfg.batch_size = static_cast<int>(to_int(meta_need(kv, "batch"), "meta: batch"));
    cfg.max_len = static_cast<int>(to_int(meta_need(kv, "max_len"), "meta: max_len"));
    cfg.head.kind = parse_task(meta_need(kv, "task"));
    cfg.head.classes = static_cast<int>(to_int(meta_need(kv, "classes"), "meta: classes"));
    cfg.metric = parse_metric(meta_need(kv, "metric"));
    cfg.layout = parse_layout(meta_need(kv, "layout"));
    cfg.policy = parse_policy(meta_need(kv, "policy"));
    cfg.protocol_mode = to_bool(meta_need(kv, "protocol"), "meta: protocol");
    cfg.stop_gradient_descriptions = to_bool(meta_need(kv, "stop_gradient"), "meta: stop_gradient");
    cfg.enc.d_model = static_cast<int>(to_int(meta_need(kv, "d_model"), "meta: d_model"));
    cfg.enc.layers = static_cast<int>(to_int(meta_need(kv, "layers"), "meta: layers"));
    cfg.enc.heads = static_cast<int>(to_int(meta_need(kv, "heads"), "meta: heads"));
    cfg.enc.ff = static_cast<int>(to_int(meta_need(kv, "ff"), "meta: ff"));
    cfg.enc.dropout = to_double(meta_need(kv, "dropout"), "meta: dropout");
    cfg.enc.max_positions =
        static_cast<int>(to_int(meta_need(kv, "max_positions"), "meta: max_positions"));

    const std::string train_path = meta_need(kv, "train");
    const std::string dev_path = meta_need(kv, "dev");
    const std::string dictionary_path = meta_need(kv, "dictionary");
    const std::string embeddings_path = meta_need(kv, "embeddings");
    b.vocab = corpus_vocabulary(train_path, dev_path, dictionary_path);
    const int want = static_cast<int>(to_int(meta_need(kv, "vocab_size"), "meta: vocab_size"));
    if (b.vocab.size() != want)
        throw std::runtime_error("analyze: vocabulary rebuilt from the annotation files has " +
                                 std::to_string(b.vocab.size()) + " entries, checkpoint expects " +
                                 std::to_string(want));
    cfg.enc.vocab_size = b.vocab.size();

    if (!dictionary_path.empty()) b.store.read_dictionary(dictionary_path, b.vocab);
    if (!embeddings_path.empty()) b.store.read_embeddings(embeddings_path);

    const std::string labels = meta_need(kv, "labels");
    if (!labels.empty())
        for (const auto& name : split_list(labels, "meta: labels")) {
            b.codec.index[name] = static_cast<int>(b.codec.names.size());
            b.codec.names.push_back(name);
        }

    b.params = load_checkpoint<float>(ckpt_path);
    b.dev = load_annotations(dev_path, &b.vocab);
    if (b.dev.empty()) throw std::runtime_error("analyze: dev split is empty");
    return b;
}

// A checkpoint that does not fit its own metadata (wrong method, missing
// parameter blocks, wrong shapes) fails here with the cause attached.
inline void check_bundle(CheckpointBundle& b) {
    try {
        const auto ex = prepare_example(b.dev.front(), b.cfg, b.store, b.codec);
        Graph<float> g;
        const auto enc = method_forward(g, b.params, b.cfg, ex, eval_alpha(b.cfg), false, nullptr);
        head_forward(g, b.params, b.cfg.head, enc, ex.inp);
    } catch (const std::exception& e) {
        throw std::runtime_error("analyze: checkpoint does not match its metadata: " +
                                 std::string(e.what()));
    }
}

// Alternates each class's examples between the fit and eval halves, so both
// sides see every label even when the dev split interleaves its classes.
inline void probe_split(const std::vector<PreparedExample>& exs,
                        std::vector<PreparedExample>& fit, std::vector<PreparedExample>& eval) {
    std::map<int, std::size_t> seen;
    for (const auto& ex : exs)
        (seen[ex.gold_class]++ % 2 == 0 ? fit : eval).push_back(ex);
}

inline void analyze_mi(CheckpointBundle& b, const std::string& ckpt_path,
                       const std::string& out_dir) {
    const auto dev_ex = prepare_examples(b.dev, b.cfg, b.store, b.codec);
    std::vector<PreparedExample> fit, eval;
    probe_split(dev_ex, fit, eval);
    const auto rep = probe_report(b.params, b.cfg, fit, eval);
    write_probe_csv(out_dir + "/mi_" + rep.method + ".csv", rep);

    MIProbeReport base_rep;
    if (b.cfg.method == Method::baseline) {
        base_rep = rep; // self-comparison: the deltas are exactly zero
    } else {
        const auto base_ckpt =
            (std::filesystem::path(ckpt_path).parent_path() / "baseline.ckpt").string();
        if (!std::filesystem::is_regular_file(base_ckpt))
            throw std::runtime_error("analyze: no sibling baseline checkpoint at " + base_ckpt);
        auto base = load_bundle(base_ckpt);
        check_bundle(base);
        if (base.vocab.size() != b.vocab.size())
            throw std::runtime_error("analyze: baseline checkpoint uses a different vocabulary");
        const auto base_ex = prepare_examples(base.dev, base.cfg, base.store, base.codec);
        std::vector<PreparedExample> bfit, beval;
        probe_split(base_ex, bfit, beval);
        base_rep = probe_report(base.params, base.cfg, bfit, beval);
    }
    write_probe_csv(out_dir + "/mi_baseline.csv", base_rep);

    const auto d = delta_mi(rep, base_rep);
    write_delta_csv(out_dir + "/mi_delta_" + rep.method + ".csv", d);
    write_line_chart_svg(out_dir + "/mi_delta_" + rep.method + ".svg",
                         "information deltas vs baseline (" + rep.method + ")", "layer",
                         {"input recoverability gain", "label accuracy gain"}, {d.dx, d.dy});
}

inline void analyze_diffmask(CheckpointBundle& b, const std::string& out_dir, int workers) {
    const auto dev_ex = prepare_examples(b.dev, b.cfg, b.store, b.codec);
    auto stack = train_gates(b.params, b.cfg, dev_ex);

    const std::size_t n = std::min<std::size_t>(8, dev_ex.size());
    std::vector<MaskHeatmap> maps(n);
    parallel_for(n, workers,
                 [&](std::size_t i) { maps[i] = compute_heatmap(stack, b.params, b.cfg, dev_ex[i]); });

    std::vector<std::vector<std::string>> tags;
    for (std::size_t i = 0; i < n; ++i) {
        write_heatmap_csv(out_dir + "/heatmap_" + std::to_string(i) + ".csv", maps[i]);
        write_heatmap_svg(out_dir + "/heatmap_" + std::to_string(i) + ".svg", maps[i]);
        std::vector<std::string> t = b.dev[i].seq.pos_tags;
        t.resize(maps[i].tokens.size(), "X");
        tags.push_back(std::move(t));
    }
    write_predictions_csv(out_dir + "/predictions.csv", maps);

    const double tau = 0.5;
    const auto agg = pos_aggregate(maps, tags, tau);
    write_pos_csv(out_dir + "/pos_aggregate.csv", agg);
    write_bar_chart_svg(out_dir + "/pos_aggregate.svg", "mean kept levels by part of speech", agg,
                        static_cast<double>(stack.levels + 1));
}

inline void analyze_mask_dump(CheckpointBundle& b, const std::string& out_dir) {
    if (b.store.description_count() == 0)
        throw std::runtime_error("mask-dump: the checkpoint has no description dictionary");
    RunConfig cfg = b.cfg;
    cfg.method = Method::kt_attn;
    cfg.layout = Layout::append;

    const PreparedExample* best = nullptr;
    PreparedExample fallback, picked;
    bool have_fallback = false;
    for (const auto& rec : b.dev) {
        auto ex = prepare_example(rec, cfg, b.store, b.codec);
        if (ex.inp.segments.size() >= 2) {
            picked = std::move(ex);
            best = &picked;
            break;
        }
        if (!have_fallback && ex.inp.segments.size() == 1) {
            fallback = std::move(ex);
            have_fallback = true;
        }
    }
    if (!best) {
        if (!have_fallback)
            throw std::runtime_error("mask-dump: no dev example resolves a dictionary entity");
        picked = std::move(fallback);
        best = &picked;
    }
    write_mask_csv(out_dir + "/mask.csv", best->inp.tokens, best->mask);
    write_mask_pgm(out_dir + "/mask.pgm", best->mask);
}

} // namespace detail

// Analysis entry point. kind selects the artifact family:
//   mi        - per-layer probe reports for the checkpoint and its sibling
//               baseline checkpoint, plus the delta CSV/SVG
//   diffmask  - gate training on the dev split, per-example heatmap CSV/SVG,
//               prediction fidelity CSV, POS aggregation CSV/SVG
//   mask-dump - visibility mask of one multi-entity dev example (CSV + PGM)
inline void cmd_analyze(const std::string& ckpt_path, const std::string& kind,
                        const std::string& out_dir, int workers = 1) {
    if (workers < 1) throw std::invalid_argument("analyze: workers must be at least 1");
    if (kind != "mi" && kind != "diffmask" && kind != "mask-dump")
        throw std::invalid_argument("analyze: unknown kind '" + kind + "'");
    auto bundle = detail::load_bundle(ckpt_path);
    detail::check_bundle(bundle);
    std::filesystem::create_directories(out_dir);
    if (kind == "mi")
        detail::analyze_mi(bundle, ckpt_path, out_dir);
    else if (kind == "diffmask")
        detail::analyze_diffmask(bundle, out_dir, workers);
    else
        detail::analyze_mask_dump(bundle, out_dir);
}

} // namespace knit
