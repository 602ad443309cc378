// SPDX-License-Identifier: Apache-2.0
//
// Minimal static SVG charts for run reports.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moecl {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::vector<Series>& series);

/// values[r][c] mapped to a white-to-blue ramp between lo and hi.
void write_heatmap(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& rows,
                   const std::vector<std::string>& cols, const std::vector<std::vector<double>>& values, double lo,
                   double hi, bool annotate);

}  // namespace moecl
