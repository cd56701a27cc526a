#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ctxmix/errors.hpp"
#include "ctxmix/scorers.hpp"
#include "ctxmix/tensor.hpp"

namespace ctxmix {

// Shortest exact decimal form; identical across runs, so diffable outputs.
inline std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    // Trim to the shortest representation that still round-trips.
    for (int prec = 1; prec < 17; ++prec) {
        char probe[32];
        std::snprintf(probe, sizeof probe, "%.*g", prec, x);
        double back;
        std::sscanf(probe, "%lf", &back);
        if (back == x) return probe;
    }
    return buf;
}

struct CsvRow {
    std::string method;
    std::string layer;
    std::string metric;
    double value = 0.0;
};

// Long-format report: "# seed=..." comment, then method,layer,metric,value.
inline void write_report_csv(const std::string& path, const std::vector<CsvRow>& rows,
                             std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "# seed=" << seed << "\n";
    out << "method,layer,metric,value\n";
    for (const auto& r : rows)
        out << r.method << ',' << r.layer << ',' << r.metric << ',' << fmt_double(r.value)
            << '\n';
    if (!out) throw IoError("write failed for '" + path + "'");
}

// One matrix per file; header row and row labels are the token strings.
inline void write_matrix_csv(const std::string& path, const Tensor& matrix,
                             const std::vector<std::string>& tokens, const std::string& method,
                             int layer, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "# seed=" << seed << " method=" << method << " layer="
        << (layer == ScoreVector::kAggregated ? std::string("aggregated")
                                              : std::to_string(layer))
        << "\n";
    for (const auto& t : tokens) out << ',' << t;
    out << '\n';
    for (std::size_t i = 0; i < matrix.dim(0); ++i) {
        out << tokens[i];
        for (std::size_t j = 0; j < matrix.dim(1); ++j) out << ',' << fmt_double(matrix(i, j));
        out << '\n';
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

namespace detail {

inline std::string heat_color(double t) {
    // White to steel blue, linear in t within [0, 1].
    const double r = 255.0 + (31.0 - 255.0) * t;
    const double g = 255.0 + (119.0 - 255.0) * t;
    const double b = 255.0 + (180.0 - 255.0) * t;
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(r + 0.5),
                  static_cast<int>(g + 0.5), static_cast<int>(b + 0.5));
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace detail

// Heatmap grid as SVG. Cell color runs linearly from white (the minimum
// value) to steel blue (the maximum); the scale is printed in the footer.
inline void write_svg_heatmap(const std::string& path, const Tensor& matrix,
                              const std::vector<std::string>& row_labels,
                              const std::vector<std::string>& col_labels,
                              const std::string& title, std::uint64_t seed) {
    const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
    if (row_labels.size() != rows || col_labels.size() != cols)
        throw ArgumentError("write_svg_heatmap: label counts do not match the matrix");
    double lo = matrix(0, 0), hi = matrix(0, 0);
    for (std::size_t i = 0; i < matrix.size(); ++i) {
        lo = std::min(lo, matrix.data()[i]);
        hi = std::max(hi, matrix.data()[i]);
    }
    const double span = hi - lo < 1e-300 ? 1.0 : hi - lo;

    const int cell = 34, pad_left = 130, pad_top = 50, pad_bottom = 34;
    const int width = pad_left + cell * static_cast<int>(cols) + 12;
    const int height = pad_top + cell * static_cast<int>(rows) + pad_bottom;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" font-family=\"monospace\" font-size=\"11\">\n";
    out << "<text x=\"8\" y=\"16\" font-size=\"13\">" << detail::xml_escape(title)
        << " (seed=" << seed << ")</text>\n";
    for (std::size_t j = 0; j < cols; ++j)
        out << "<text x=\"" << pad_left + static_cast<int>(j) * cell + 4 << "\" y=\""
            << pad_top - 6 << "\">" << detail::xml_escape(col_labels[j]) << "</text>\n";
    for (std::size_t i = 0; i < rows; ++i)
        out << "<text x=\"4\" y=\"" << pad_top + static_cast<int>(i) * cell + 21 << "\">"
            << detail::xml_escape(row_labels[i]) << "</text>\n";
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const double t = (matrix(i, j) - lo) / span;
            out << "<rect x=\"" << pad_left + static_cast<int>(j) * cell << "\" y=\""
                << pad_top + static_cast<int>(i) * cell << "\" width=\"" << cell
                << "\" height=\"" << cell << "\" fill=\"" << detail::heat_color(t)
                << "\" stroke=\"#cccccc\"><title>" << fmt_double(matrix(i, j))
                << "</title></rect>\n";
        }
    out << "<text x=\"8\" y=\"" << height - 12 << "\">scale: white=" << fmt_double(lo)
        << " blue=" << fmt_double(hi) << "</text>\n";
    out << "</svg>\n";
    if (!out) throw IoError("write failed for '" + path + "'");
}

} // namespace ctxmix
