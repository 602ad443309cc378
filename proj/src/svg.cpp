// SPDX-License-Identifier: Apache-2.0
#include "moecl/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "moecl/error.hpp"

namespace moecl {

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::ofstream open(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    return out;
}

}  // namespace

void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::vector<Series>& series) {
    const double w = 640, h = 400, left = 60, right = 150, top = 40, bottom = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (double x : s.x) x0 = std::min(x0, x), x1 = std::max(x1, x);
        for (double y : s.y) y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y0 -= 1, y1 += 1;
    const double pw = w - left - right, ph = h - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

    auto out = open(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
        out << "<text x=\"" << left - 6 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
            << "</text>\n";
        out << "<text x=\"" << num(px(xv)) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(xv)
            << "</text>\n";
    }
    out << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">" << escape(x_label)
        << "</text>\n";
    out << "<text x=\"14\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
        << top + ph / 2 << ")\">" << escape(y_label) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % 10];
        std::string points;
        for (std::size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i) {
            points += num(px(series[s].x[i])) + "," + num(py(series[s].y[i])) + " ";
            out << "<circle cx=\"" << num(px(series[s].x[i])) << "\" cy=\"" << num(py(series[s].y[i]))
                << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << points << "\"/>\n";
        const double ly = top + 14.0 * static_cast<double>(s);
        out << "<line x1=\"" << w - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 30 << "\" y2=\"" << ly
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << w - right + 34 << "\" y=\"" << ly + 4 << "\">" << escape(series[s].name) << "</text>\n";
    }
    out << "</svg>\n";
}

void write_heatmap(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& rows,
                   const std::vector<std::string>& cols, const std::vector<std::vector<double>>& values, double lo,
                   double hi, bool annotate) {
    const double cell = cols.size() > 12 ? 22 : 48;
    const double left = 150, top = 60;
    const double w = left + cell * static_cast<double>(cols.size()) + 20;
    const double h = top + cell * static_cast<double>(rows.size()) + 20;
    auto out = open(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
        out << "<text x=\"" << num(left + cell * (c + 0.5)) << "\" y=\"" << top - 6 << "\" text-anchor=\"middle\">"
            << escape(cols[c]) << "</text>\n";
    }
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out << "<text x=\"" << left - 6 << "\" y=\"" << num(top + cell * (r + 0.5) + 4) << "\" text-anchor=\"end\">"
            << escape(rows[r]) << "</text>\n";
        for (std::size_t c = 0; c < cols.size() && c < values[r].size(); ++c) {
            const double v = values[r][c];
            if (std::isnan(v)) continue;
            const double t = std::clamp((v - lo) / span, 0.0, 1.0);
            const int red = static_cast<int>(255 - 225 * t), green = static_cast<int>(255 - 150 * t);
            char fill[16];
            std::snprintf(fill, sizeof fill, "#%02x%02xff", red, green);
            out << "<rect x=\"" << num(left + cell * c) << "\" y=\"" << num(top + cell * r) << "\" width=\"" << cell
                << "\" height=\"" << cell << "\" fill=\"" << fill << "\" stroke=\"#ddd\"/>\n";
            if (annotate) {
                out << "<text x=\"" << num(left + cell * (c + 0.5)) << "\" y=\"" << num(top + cell * (r + 0.5) + 4)
                    << "\" text-anchor=\"middle\" fill=\"" << (t > 0.6 ? "white" : "black") << "\">" << num(v).substr(0, num(v).size() - 1)
                    << "</text>\n";
            }
        }
    }
    out << "</svg>\n";
}

}  // namespace moecl
