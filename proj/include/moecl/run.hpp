// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the moecl binary. Each writes into its own
// run directory; reruns with the same config and seed reproduce every CSV and
// JSON file byte for byte.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moecl/config.hpp"
#include "moecl/metrics.hpp"
#include "moecl/trainer.hpp"

namespace moecl {

std::filesystem::path checkpoint_path(const RunConfig& config);
std::filesystem::path run_directory(const RunConfig& config);

/// The synthetic world and stream described by the config (or the saved stream).
SyntheticWorld make_world(const RunConfig& config);
TaskStream make_stream(const RunConfig& config);

struct PretrainResult {
    std::filesystem::path checkpoint;
    PretrainReport report;
    double reference_score = 0.0;  // mean reference-autoencoder score on pretext features
};

/// Pretrains and freezes the backbone, fits the reference autoencoder and
/// writes both into the checkpoint together with config.json.
PretrainResult cmd_pretrain(const RunConfig& config, const ProgressFn& progress = {});

struct PretrainedState {
    Backbone backbone;
    Container container;
};
PretrainedState load_pretrained(const RunConfig& config);

struct RunSummary {
    std::filesystem::path dir;
    std::optional<MetricReport> metrics;
    std::optional<MetricReport> baseline;
    std::optional<CilReport> cil;
    std::optional<CilReport> naive_cil;
    std::optional<StreamResult> stream;
};

/// Executes the configured mode and writes config.json, matrix.csv,
/// metrics.json, activations.csv, ddas_scores.csv, ddas_features.csv,
/// routing.json and checkpoint.mclb (cil mode: cil_steps.csv and metrics.json).
RunSummary cmd_run(const RunConfig& config, const ProgressFn& progress = {});

enum class SweepAxis { Threshold, Experts, TopK };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& name);

struct SweepRow {
    double value = 0.0;
    std::optional<double> transfer;
    double average = 0.0;
    double last = 0.0;
    double zero_shot_rate = 0.0;  // percent of all evaluated images
    double task_rate = 0.0;       // percent of learned-task images routed to their own task
};

/// Repeated runs varying one axis; writes sweep_<axis>.csv into the run
/// directory and, for the model axes, one subdirectory per grid point.
std::vector<SweepRow> cmd_sweep(const RunConfig& config, SweepAxis axis, const std::vector<double>& grid,
                                const ProgressFn& progress = {});

/// Prints the matrix and aggregates, and writes SVG plots next to the data.
void cmd_report(const std::filesystem::path& dir, std::ostream& out);

}  // namespace moecl
