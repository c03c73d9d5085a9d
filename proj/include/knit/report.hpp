// Artifact writers: CSV tables, SVG charts (line, heatmap grid, bars), and
// PGM images. Every writer is a pure function of its inputs with pinned
// number formatting, so identical data produces byte-identical files.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/diffmask.hpp"
#include "knit/probes.hpp"

namespace knit {

namespace detail {

// Shortest representation that round-trips a double exactly.
inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Compact label formatting for file names and axis text.
inline std::string fmtg(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

inline std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::ofstream open_artifact(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("report: cannot open for write: " + path);
    return os;
}

// Three-stop color ramp (purple → green → yellow) over t ∈ [0,1].
inline std::string ramp_color(double t) {
    static const int stops[3][3] = {{0x44, 0x01, 0x54}, {0x21, 0x90, 0x8c}, {0xfd, 0xe7, 0x25}};
    t = std::clamp(t, 0.0, 1.0);
    const int seg = t <= 0.5 ? 0 : 1;
    const double u = t <= 0.5 ? t * 2.0 : (t - 0.5) * 2.0;
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x",
                  static_cast<int>(std::lround(stops[seg][0] + u * (stops[seg + 1][0] - stops[seg][0]))),
                  static_cast<int>(std::lround(stops[seg][1] + u * (stops[seg + 1][1] - stops[seg][1]))),
                  static_cast<int>(std::lround(stops[seg][2] + u * (stops[seg + 1][2] - stops[seg][2]))));
    return buf;
}

} // namespace detail

// ---- CSV ----------------------------------------------------------------

inline void write_probe_csv(const std::string& path, const MIProbeReport& rep) {
    auto os = detail::open_artifact(path);
    os << "layer,x_loss,y_acc\n";
    for (std::size_t l = 0; l < rep.x_loss.size(); ++l)
        os << l << "," << detail::fmt17(rep.x_loss[l]) << "," << detail::fmt17(rep.y_acc[l])
           << "\n";
}

inline void write_delta_csv(const std::string& path, const DeltaMI& d) {
    auto os = detail::open_artifact(path);
    os << "layer,dx,dy\n";
    for (std::size_t l = 0; l < d.dx.size(); ++l)
        os << l << "," << detail::fmt17(d.dx[l]) << "," << detail::fmt17(d.dy[l]) << "\n";
}

inline void write_heatmap_csv(const std::string& path, const MaskHeatmap& hm) {
    auto os = detail::open_artifact(path);
    os << "token";
    for (std::size_t l = 0; l < hm.z.size(); ++l) os << ",level" << l;
    os << "\n";
    for (std::size_t j = 0; j < hm.tokens.size(); ++j) {
        os << hm.tokens[j];
        for (const auto& row : hm.z) os << "," << detail::fmt17(row[j]);
        os << "\n";
    }
}

inline void write_predictions_csv(const std::string& path, const std::vector<MaskHeatmap>& maps) {
    auto os = detail::open_artifact(path);
    os << "example,prediction_clean,prediction_masked,divergence\n";
    for (std::size_t i = 0; i < maps.size(); ++i)
        os << i << "," << detail::fmt17(maps[i].prediction_clean) << ","
           << detail::fmt17(maps[i].prediction_masked) << ","
           << detail::fmt17(maps[i].divergence) << "\n";
}

inline void write_pos_csv(const std::string& path, const std::map<std::string, double>& agg) {
    auto os = detail::open_artifact(path);
    os << "pos,mean_levels\n";
    for (const auto& [tag, mean] : agg) os << tag << "," << detail::fmt17(mean) << "\n";
}

inline void write_mask_csv(const std::string& path, const std::vector<std::string>& tokens,
                           const VisibilityMask& mask) {
    if (static_cast<int>(tokens.size()) != mask.T)
        throw std::invalid_argument("mask csv: token count differs from the mask size");
    auto os = detail::open_artifact(path);
    os << "token";
    for (const auto& t : tokens) os << "," << t;
    os << "\n";
    for (int j = 0; j < mask.T; ++j) {
        os << tokens[static_cast<std::size_t>(j)];
        for (int k = 0; k < mask.T; ++k) os << "," << (mask.at(j, k) ? 1 : 0);
        os << "\n";
    }
}

// ---- PGM ----------------------------------------------------------------

// Plain (ASCII) PGM; gray holds row-major values in [0, 255].
inline void write_pgm(const std::string& path, int rows, int cols, const std::vector<int>& gray) {
    if (rows < 1 || cols < 1 || gray.size() != static_cast<std::size_t>(rows) * cols)
        throw std::invalid_argument("pgm: bad dimensions");
    auto os = detail::open_artifact(path);
    os << "P2\n" << cols << " " << rows << "\n255\n";
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (c) os << " ";
            os << gray[static_cast<std::size_t>(r) * cols + c];
        }
        os << "\n";
    }
}

// ---- SVG ----------------------------------------------------------------

// Multi-series line chart over an integer x axis (0..n−1).
inline void write_line_chart_svg(const std::string& path, const std::string& title,
                                 const std::string& x_label,
                                 const std::vector<std::string>& series_names,
                                 const std::vector<std::vector<double>>& series) {
    if (series_names.size() != series.size() || series.empty())
        throw std::invalid_argument("line chart: series names and data disagree");
    const std::size_t n = series.front().size();
    for (const auto& s : series)
        if (s.size() != n || n < 1) throw std::invalid_argument("line chart: ragged series");

    double lo = series[0][0], hi = series[0][0];
    for (const auto& s : series)
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi - lo < 1e-12) {
        lo -= 1.0;
        hi += 1.0;
    } else {
        const double pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    }

    const double W = 480, H = 300, ml = 56, mr = 120, mt = 32, mb = 40;
    const double pw = W - ml - mr, ph = H - mt - mb;
    auto px = [&](std::size_t i) {
        return ml + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1));
    };
    auto py = [&](double v) { return mt + ph * (1.0 - (v - lo) / (hi - lo)); };
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

    auto os = detail::open_artifact(path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<text x=\"" << detail::fmt2(ml) << "\" y=\"18\" font-size=\"13\">"
       << detail::xml_escape(title) << "</text>\n";
    os << "<line x1=\"" << detail::fmt2(ml) << "\" y1=\"" << detail::fmt2(mt + ph) << "\" x2=\""
       << detail::fmt2(ml + pw) << "\" y2=\"" << detail::fmt2(mt + ph)
       << "\" stroke=\"#333\"/>\n";
    os << "<line x1=\"" << detail::fmt2(ml) << "\" y1=\"" << detail::fmt2(mt) << "\" x2=\""
       << detail::fmt2(ml) << "\" y2=\"" << detail::fmt2(mt + ph) << "\" stroke=\"#333\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = lo + (hi - lo) * t / 4.0;
        os << "<text x=\"" << detail::fmt2(ml - 6) << "\" y=\"" << detail::fmt2(py(v) + 4)
           << "\" text-anchor=\"end\">" << detail::fmtg(v) << "</text>\n";
    }
    for (std::size_t i = 0; i < n; ++i)
        os << "<text x=\"" << detail::fmt2(px(i)) << "\" y=\"" << detail::fmt2(mt + ph + 16)
           << "\" text-anchor=\"middle\">" << i << "</text>\n";
    os << "<text x=\"" << detail::fmt2(ml + pw / 2) << "\" y=\"" << detail::fmt2(H - 8)
       << "\" text-anchor=\"middle\">" << detail::xml_escape(x_label) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        os << "<polyline fill=\"none\" stroke=\"" << palette[s % 5] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < n; ++i) {
            if (i) os << " ";
            os << detail::fmt2(px(i)) << "," << detail::fmt2(py(series[s][i]));
        }
        os << "\"/>\n";
        os << "<text x=\"" << detail::fmt2(ml + pw + 8) << "\" y=\"" << detail::fmt2(mt + 14 + 16 * static_cast<double>(s))
           << "\" fill=\"" << palette[s % 5] << "\">" << detail::xml_escape(series_names[s])
           << "</text>\n";
    }
    os << "</svg>\n";
}

// Token-by-level gate heatmap; rows are tokens, columns residual levels.
inline void write_heatmap_svg(const std::string& path, const MaskHeatmap& hm) {
    if (hm.z.empty()) throw std::invalid_argument("heatmap svg: empty heatmap");
    const std::size_t levels = hm.z.size(), n = hm.tokens.size();
    const double cell = 22, label_w = 110, mt = 28;
    const double W = label_w + cell * static_cast<double>(levels) + 16;
    const double H = mt + cell * static_cast<double>(n) + 12;

    auto os = detail::open_artifact(path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t l = 0; l < levels; ++l)
        os << "<text x=\"" << detail::fmt2(label_w + cell * (static_cast<double>(l) + 0.5))
           << "\" y=\"" << detail::fmt2(mt - 8) << "\" text-anchor=\"middle\">" << l
           << "</text>\n";
    for (std::size_t j = 0; j < n; ++j) {
        os << "<text x=\"" << detail::fmt2(label_w - 6) << "\" y=\""
           << detail::fmt2(mt + cell * (static_cast<double>(j) + 0.5) + 4)
           << "\" text-anchor=\"end\">" << detail::xml_escape(hm.tokens[j]) << "</text>\n";
        for (std::size_t l = 0; l < levels; ++l) {
            os << "<rect x=\"" << detail::fmt2(label_w + cell * static_cast<double>(l)) << "\" y=\""
               << detail::fmt2(mt + cell * static_cast<double>(j)) << "\" width=\""
               << detail::fmt2(cell - 1) << "\" height=\"" << detail::fmt2(cell - 1)
               << "\" fill=\"" << detail::ramp_color(hm.z[l][j]) << "\"/>\n";
        }
    }
    os << "</svg>\n";
}

// Bar chart of per-POS mean kept-level counts.
inline void write_bar_chart_svg(const std::string& path, const std::string& title,
                                const std::map<std::string, double>& values, double y_max) {
    if (values.empty()) throw std::invalid_argument("bar chart: no values");
    if (y_max <= 0.0) throw std::invalid_argument("bar chart: y_max must be positive");
    const double bar_w = 46, gap = 22, ml = 48, mt = 36, ph = 200, mb = 44;
    const double W = ml + (bar_w + gap) * static_cast<double>(values.size()) + 24;
    const double H = mt + ph + mb;

    auto os = detail::open_artifact(path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<text x=\"" << detail::fmt2(ml) << "\" y=\"18\" font-size=\"13\">"
       << detail::xml_escape(title) << "</text>\n";
    os << "<line x1=\"" << detail::fmt2(ml) << "\" y1=\"" << detail::fmt2(mt + ph) << "\" x2=\""
       << detail::fmt2(W - 12) << "\" y2=\"" << detail::fmt2(mt + ph) << "\" stroke=\"#333\"/>\n";
    double x = ml + gap / 2;
    for (const auto& [tag, v] : values) {
        const double h = ph * std::clamp(v / y_max, 0.0, 1.0);
        os << "<rect x=\"" << detail::fmt2(x) << "\" y=\"" << detail::fmt2(mt + ph - h)
           << "\" width=\"" << detail::fmt2(bar_w) << "\" height=\"" << detail::fmt2(h)
           << "\" fill=\"#1f77b4\"/>\n";
        os << "<text x=\"" << detail::fmt2(x + bar_w / 2) << "\" y=\""
           << detail::fmt2(mt + ph - h - 5) << "\" text-anchor=\"middle\">" << detail::fmtg(v)
           << "</text>\n";
        os << "<text x=\"" << detail::fmt2(x + bar_w / 2) << "\" y=\""
           << detail::fmt2(mt + ph + 16) << "\" text-anchor=\"middle\">"
           << detail::xml_escape(tag) << "</text>\n";
        x += bar_w + gap;
    }
    os << "</svg>\n";
}

} // namespace knit
