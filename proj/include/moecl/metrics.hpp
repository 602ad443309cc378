// SPDX-License-Identifier: Apache-2.0
//
// Accuracy matrix of a continual run: A[i][j] is the accuracy on task j's
// evaluation split after training tasks 1..i. Indices are 1-based.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moecl {

class EvalMatrix {
   public:
    EvalMatrix() = default;
    explicit EvalMatrix(std::size_t tasks, std::vector<std::string> names = {});

    std::size_t size() const noexcept { return tasks_; }
    const std::vector<std::string>& names() const noexcept { return names_; }
    void record(std::size_t i, std::size_t j, double accuracy);
    bool filled(std::size_t i, std::size_t j) const;
    double at(std::size_t i, std::size_t j) const;
    bool complete() const;

    /// Header "after,<names>", one row per trained task, one decimal.
    void write_csv(const std::filesystem::path& path) const;
    static EvalMatrix read_csv(const std::filesystem::path& path);

    bool operator==(const EvalMatrix&) const = default;

   private:
    std::size_t index(std::size_t i, std::size_t j) const;

    std::size_t tasks_ = 0;
    std::vector<std::string> names_;
    std::vector<double> values_;
    std::vector<bool> set_;
};

struct MetricReport {
    std::vector<std::optional<double>> transfer;  // undefined for the first task
    std::vector<double> average;
    std::vector<double> last;
    std::optional<double> transfer_mean;  // undefined when T = 1
    double average_mean = 0.0;
    double last_mean = 0.0;
};

MetricReport aggregate(const EvalMatrix& matrix);

struct CilReport {
    std::vector<double> steps;
    double average = 0.0;
    double last = 0.0;
};

CilReport cil_aggregate(std::span<const double> step_accuracies);

/// Full-precision matrix and aggregates.
void write_metrics_json(const EvalMatrix& matrix, const MetricReport& report, const std::filesystem::path& path);
void write_cil_json(const CilReport& report, const std::filesystem::path& path);

}  // namespace moecl
