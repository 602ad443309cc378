// SPDX-License-Identifier: Apache-2.0
//
// moecl: pretrain | run | sweep | report. Failures print one JSON object on
// stderr and exit nonzero.

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "moecl/error.hpp"
#include "moecl/run.hpp"

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string checkpoint;
    bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool with_mode) {
    app->add_option("--config", c.config, "JSON config file (missing keys keep defaults)")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "run seed");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--checkpoint", c.checkpoint, "pretrained checkpoint path");
    app->add_option("--set", c.overrides, "override a config value, e.g. --set train.iterations=200");
    app->add_flag("--quiet", c.quiet, "no progress lines");
    if (with_mode) {
        app->add_option("--mode", c.mode, "mtil, fewshot or cil")->check(CLI::IsMember({"mtil", "fewshot", "cil"}));
    }
}

moecl::RunConfig resolve(const Common& c, bool pretrain) {
    std::vector<std::string> overrides = c.overrides;
    auto quoted = [](const std::string& s) { return nlohmann::json(s).dump(); };
    if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
    if (!c.mode.empty()) overrides.push_back("mode=" + quoted(c.mode));
    if (!c.checkpoint.empty()) overrides.push_back("checkpoint=" + quoted(c.checkpoint));
    if (!c.out.empty()) {
        if (pretrain && c.checkpoint.empty()) {
            overrides.push_back("checkpoint=" + quoted((std::filesystem::path(c.out) / "checkpoint.mclb").string()));
        }
        overrides.push_back("output_dir=" + quoted(c.out));
    }
    return moecl::load_run_config(c.config, overrides);
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> grid;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            grid.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw moecl::Error(moecl::ErrorKind::Config, "grid value '" + item + "' is not a number");
        }
    }
    return grid;
}

int fail(std::string_view kind, const std::string& message) {
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual learning with mixture-of-adapter experts on a desk-scale two-tower model"};
    app.require_subcommand(1);

    Common pre_opts, run_opts, sweep_opts;
    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone, fit the reference autoencoder");
    add_common(pre, pre_opts, false);
    auto* run = app.add_subcommand("run", "train a task stream and write the run directory");
    add_common(run, run_opts, true);
    auto* sweep = app.add_subcommand("sweep", "repeat runs along one axis");
    add_common(sweep, sweep_opts, true);
    std::string axis = "threshold", grid_text;
    sweep->add_option("--axis", axis, "threshold, experts or k")->check(CLI::IsMember({"threshold", "experts", "k"}));
    sweep->add_option("--grid", grid_text, "comma-separated values (default: the config's sweep grid)");
    auto* report = app.add_subcommand("report", "print tables and write SVG plots for a run directory");
    std::string report_dir;
    report->add_option("dir", report_dir, "run directory")->required();
    auto* config_cmd = app.add_subcommand("config", "print the effective config");
    Common config_opts;
    add_common(config_cmd, config_opts, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what());
    }

    auto progress_for = [](const Common& c) -> moecl::ProgressFn {
        if (c.quiet) return {};
        return [](const std::string& line) { std::cerr << line << std::endl; };
    };

    try {
        if (*pre) {
            const auto config = resolve(pre_opts, true);
            const auto result = moecl::cmd_pretrain(config, progress_for(pre_opts));
            std::cout << nlohmann::ordered_json{{"checkpoint", result.checkpoint.string()},
                                                {"initial_loss", result.report.initial_loss},
                                                {"final_loss", result.report.final_loss},
                                                {"heldout_zero_shot", result.report.heldout_zero_shot},
                                                {"reference_score", result.reference_score}}
                             .dump(2)
                      << std::endl;
        } else if (*run) {
            const auto config = resolve(run_opts, false);
            const auto summary = moecl::cmd_run(config, progress_for(run_opts));
            std::cout << "run directory: " << summary.dir.string() << "\n";
            moecl::cmd_report(summary.dir, std::cout);
        } else if (*sweep) {
            const auto config = resolve(sweep_opts, false);
            const auto ax = moecl::sweep_axis_from_string(axis);
            std::vector<double> grid = parse_grid(grid_text);
            if (grid_text.empty()) {
                if (ax == moecl::SweepAxis::Threshold) {
                    grid = config.sweep.thresholds;
                } else {
                    const auto& src = ax == moecl::SweepAxis::Experts ? config.sweep.experts : config.sweep.top_k;
                    grid.assign(src.begin(), src.end());
                }
            }
            moecl::cmd_sweep(config, ax, grid, progress_for(sweep_opts));
            std::cout << "sweep directory: " << moecl::run_directory(config).string() << "\n";
            moecl::cmd_report(moecl::run_directory(config), std::cout);
        } else if (*report) {
            moecl::cmd_report(report_dir, std::cout);
        } else if (*config_cmd) {
            std::cout << moecl::to_json(resolve(config_opts, false)).dump(2) << std::endl;
        }
    } catch (const moecl::Error& e) {
        return fail(moecl::to_string(e.kind()), e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
    return 0;
}
