// SPDX-License-Identifier: Apache-2.0
#include "moecl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "moecl/error.hpp"

namespace moecl {

EvalMatrix::EvalMatrix(std::size_t tasks, std::vector<std::string> names)
    : tasks_(tasks), names_(std::move(names)), values_(tasks * tasks, 0.0), set_(tasks * tasks, false) {
    if (names_.empty()) {
        for (std::size_t j = 1; j <= tasks; ++j) names_.push_back("task" + std::to_string(j));
    }
    if (names_.size() != tasks) throw Error(ErrorKind::Dimension, "eval matrix: name count differs from task count");
}

std::size_t EvalMatrix::index(std::size_t i, std::size_t j) const {
    if (i < 1 || i > tasks_ || j < 1 || j > tasks_) {
        throw Error(ErrorKind::OutOfRange, "eval matrix: cell (" + std::to_string(i) + ", " + std::to_string(j) +
                                               ") outside a " + std::to_string(tasks_) + "-task matrix");
    }
    return (i - 1) * tasks_ + (j - 1);
}

void EvalMatrix::record(std::size_t i, std::size_t j, double accuracy) {
    const std::size_t k = index(i, j);
    if (!(accuracy >= 0.0 && accuracy <= 100.0)) {
        throw Error(ErrorKind::OutOfRange, "eval matrix: accuracy " + std::to_string(accuracy) + " outside [0, 100]");
    }
    if (set_[k]) {
        throw Error(ErrorKind::Duplicate, "eval matrix: cell (" + std::to_string(i) + ", " + std::to_string(j) +
                                              ") already recorded");
    }
    values_[k] = accuracy;
    set_[k] = true;
}

bool EvalMatrix::filled(std::size_t i, std::size_t j) const { return set_[index(i, j)]; }

double EvalMatrix::at(std::size_t i, std::size_t j) const {
    const std::size_t k = index(i, j);
    if (!set_[k]) throw Error(ErrorKind::State, "eval matrix: cell not recorded");
    return values_[k];
}

bool EvalMatrix::complete() const {
    return std::all_of(set_.begin(), set_.end(), [](bool b) { return b; });
}

void EvalMatrix::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << "after";
    for (const auto& n : names_) out << ',' << n;
    out << '\n';
    char cell[32];
    for (std::size_t i = 1; i <= tasks_; ++i) {
        bool any = false;
        for (std::size_t j = 1; j <= tasks_; ++j) any = any || filled(i, j);
        if (!any) continue;
        out << names_[i - 1];
        for (std::size_t j = 1; j <= tasks_; ++j) {
            out << ',';
            if (filled(i, j)) {
                std::snprintf(cell, sizeof cell, "%.1f", at(i, j));
                out << cell;
            }
        }
        out << '\n';
    }
    if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

EvalMatrix EvalMatrix::read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::Format, path.string() + ": empty matrix file");
    auto header = split_csv(line);
    if (header.empty() || header[0] != "after") throw Error(ErrorKind::Format, path.string() + ": missing header");
    header.erase(header.begin());
    EvalMatrix m(header.size(), header);
    std::size_t i = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != header.size() + 1) throw Error(ErrorKind::Format, path.string() + ": ragged row");
        if (++i > m.size()) throw Error(ErrorKind::Format, path.string() + ": more rows than tasks");
        for (std::size_t j = 1; j < cells.size(); ++j) {
            if (cells[j].empty()) continue;
            try {
                m.record(i, j, std::stod(cells[j]));
            } catch (const std::invalid_argument&) {
                throw Error(ErrorKind::Format, path.string() + ": bad number '" + cells[j] + "'");
            }
        }
    }
    return m;
}

MetricReport aggregate(const EvalMatrix& m) {
    const std::size_t t = m.size();
    if (t == 0) throw Error(ErrorKind::EmptyInput, "aggregate: empty matrix");
    if (!m.complete()) throw Error(ErrorKind::State, "aggregate: matrix is incomplete");
    MetricReport r;
    for (std::size_t j = 1; j <= t; ++j) {
        double col = 0.0, above = 0.0;
        for (std::size_t i = 1; i <= t; ++i) {
            col += m.at(i, j);
            if (i < j) above += m.at(i, j);
        }
        r.average.push_back(col / static_cast<double>(t));
        r.last.push_back(m.at(t, j));
        r.transfer.push_back(j == 1 ? std::nullopt : std::optional<double>(above / static_cast<double>(j - 1)));
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); };
    r.average_mean = mean(r.average);
    r.last_mean = mean(r.last);
    if (t > 1) {
        double s = 0.0;
        for (std::size_t j = 1; j < t; ++j) s += *r.transfer[j];
        r.transfer_mean = s / static_cast<double>(t - 1);
    }
    return r;
}

CilReport cil_aggregate(std::span<const double> steps) {
    if (steps.empty()) throw Error(ErrorKind::EmptyInput, "cil_aggregate: no steps");
    CilReport r;
    r.steps.assign(steps.begin(), steps.end());
    r.average = std::accumulate(steps.begin(), steps.end(), 0.0) / static_cast<double>(steps.size());
    r.last = steps.back();
    return r;
}

namespace {

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace

void write_metrics_json(const EvalMatrix& m, const MetricReport& r, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["tasks"] = m.names();
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 1; i <= m.size(); ++i) {
        auto row = nlohmann::ordered_json::array();
        for (std::size_t c = 1; c <= m.size(); ++c) row.push_back(m.at(i, c));
        rows.push_back(row);
    }
    j["matrix"] = rows;
    auto transfer = nlohmann::ordered_json::array();
    for (const auto& t : r.transfer) transfer.push_back(t ? nlohmann::ordered_json(*t) : nlohmann::ordered_json());
    j["per_task"] = {{"transfer", transfer}, {"average", r.average}, {"last", r.last}};
    j["transfer"] = r.transfer_mean ? nlohmann::ordered_json(*r.transfer_mean) : nlohmann::ordered_json();
    j["average"] = r.average_mean;
    j["last"] = r.last_mean;
    write_json(j, path);
}

void write_cil_json(const CilReport& r, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["steps"] = r.steps;
    j["average"] = r.average;
    j["last"] = r.last;
    write_json(j, path);
}

}  // namespace moecl
