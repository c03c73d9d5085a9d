// Task metrics: accuracy, binary Matthews correlation, Pearson correlation,
// and exact-span F1 over BIO tag sequences. Degenerate denominators are
// reported as 0 with a flag rather than NaN.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace knit {

enum class MetricKind { accuracy, matthews, pearson, span_f1 };

inline std::string metric_name(MetricKind k) {
    switch (k) {
        case MetricKind::accuracy: return "accuracy";
        case MetricKind::matthews: return "matthews";
        case MetricKind::pearson: return "pearson";
        case MetricKind::span_f1: return "span_f1";
    }
    throw std::logic_error("unknown metric kind");
}

inline MetricKind parse_metric(const std::string& name) {
    if (name == "accuracy") return MetricKind::accuracy;
    if (name == "matthews") return MetricKind::matthews;
    if (name == "pearson") return MetricKind::pearson;
    if (name == "span_f1") return MetricKind::span_f1;
    throw std::invalid_argument("unknown metric '" + name + "'");
}

struct MetricResult {
    double value = 0.0;
    bool degenerate = false;
};

inline MetricResult metric_accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (pred.size() != gold.size() || pred.empty())
        throw std::invalid_argument("accuracy: need equal, non-empty prediction/gold lists");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i] ? 1 : 0;
    return {static_cast<double>(hit) / static_cast<double>(pred.size()), false};
}

// Binary Matthews correlation from the confusion counts; a zero denominator
// (any all-one-class margin) is degenerate and reported as 0.
inline MetricResult metric_matthews(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (pred.size() != gold.size() || pred.empty())
        throw std::invalid_argument("matthews: need equal, non-empty prediction/gold lists");
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] != 0 && pred[i] != 1)
            throw std::invalid_argument("matthews: predictions must be binary");
        if (gold[i] != 0 && gold[i] != 1)
            throw std::invalid_argument("matthews: gold labels must be binary");
        if (pred[i] == 1 && gold[i] == 1) ++tp;
        if (pred[i] == 1 && gold[i] == 0) ++fp;
        if (pred[i] == 0 && gold[i] == 1) ++fn;
        if (pred[i] == 0 && gold[i] == 0) ++tn;
    }
    const double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    if (denom == 0.0) return {0.0, true};
    return {(tp * tn - fp * fn) / denom, false};
}

inline MetricResult metric_pearson(const std::vector<double>& pred,
                                   const std::vector<double>& gold) {
    if (pred.size() != gold.size() || pred.empty())
        throw std::invalid_argument("pearson: need equal, non-empty prediction/gold lists");
    const double n = static_cast<double>(pred.size());
    double mp = 0, mg = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mg += gold[i];
    }
    mp /= n;
    mg /= n;
    double spg = 0, spp = 0, sgg = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dp = pred[i] - mp;
        const double dg = gold[i] - mg;
        spg += dp * dg;
        spp += dp * dp;
        sgg += dg * dg;
    }
    if (spp == 0.0 || sgg == 0.0) return {0.0, true};
    return {spg / std::sqrt(spp * sgg), false};
}

struct TagSpan {
    int start;
    int end; // inclusive
    std::string type;
    bool operator==(const TagSpan& o) const = default;
};

// Decodes BIO tags into typed spans. An I-X continuing nothing (after O, a
// different type, or at sequence start) opens a new span, matching the
// conventional lenient reading.
inline std::vector<TagSpan> decode_bio(const std::vector<std::string>& tags) {
    std::vector<TagSpan> spans;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const auto& t = tags[i];
        if (t == "O") continue;
        if (t.size() < 3 || (t[0] != 'B' && t[0] != 'I') || t[1] != '-')
            throw std::invalid_argument("span_f1: malformed BIO tag '" + t + "'");
        const std::string type = t.substr(2);
        const bool continues = t[0] == 'I' && !spans.empty() &&
                               spans.back().end == static_cast<int>(i) - 1 &&
                               spans.back().type == type;
        if (continues) {
            spans.back().end = static_cast<int>(i);
        } else {
            spans.push_back({static_cast<int>(i), static_cast<int>(i), type});
        }
    }
    return spans;
}

// Exact-span micro F1 over a batch of BIO-tagged sequences.
inline MetricResult metric_span_f1(const std::vector<std::vector<std::string>>& pred,
                                   const std::vector<std::vector<std::string>>& gold) {
    if (pred.size() != gold.size() || pred.empty())
        throw std::invalid_argument("span_f1: need equal, non-empty prediction/gold lists");
    std::size_t tp = 0, n_pred = 0, n_gold = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != gold[i].size())
            throw std::invalid_argument("span_f1: tag sequence length mismatch at row " +
                                        std::to_string(i));
        const auto ps = decode_bio(pred[i]);
        const auto gs = decode_bio(gold[i]);
        n_pred += ps.size();
        n_gold += gs.size();
        for (const auto& s : ps)
            for (const auto& g : gs)
                if (s == g) {
                    ++tp;
                    break;
                }
    }
    if (n_pred == 0 && n_gold == 0) return {1.0, false}; // vacuously perfect
    const double p = n_pred ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
    const double r = n_gold ? static_cast<double>(tp) / static_cast<double>(n_gold) : 0.0;
    if (p + r == 0.0) return {0.0, true};
    return {2.0 * p * r / (p + r), false};
}

} // namespace knit
