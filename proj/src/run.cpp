// SPDX-License-Identifier: Apache-2.0
#include "moecl/run.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "moecl/error.hpp"
#include "moecl/svg.hpp"

namespace moecl {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    return out;
}

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::shared_ptr<const FeatureSource> make_feature_source(const RunConfig& config, const Backbone& backbone) {
    if (config.ddas_features == FeatureKind::Backbone) return std::make_shared<BackboneFeatures>(backbone);
    return std::make_shared<RandomProjectionFeatures>(config.stream.world.patch_dim, backbone.geometry().width,
                                                      derive_seed(config.stream.data_seed, "projection"));
}

// Seeds are stored as two exact 32-bit halves.
void put_seed(Container& c, const std::string& name, std::uint64_t seed) {
    c.put(name, {2}, {static_cast<double>(seed >> 32), static_cast<double>(seed & 0xffffffffULL)});
}

std::uint64_t get_seed(const Container& c, const std::string& name) {
    const auto& v = c.get(name).values;
    return (static_cast<std::uint64_t>(v.at(0)) << 32) | static_cast<std::uint64_t>(v.at(1));
}

ordered_json routing_json(const RoutingSummary& r) {
    return {{"seen_samples", r.seen_samples},     {"identified", r.identified},
            {"routed_to_own", r.routed_to_own},   {"unseen_samples", r.unseen_samples},
            {"unseen_zero_shot", r.unseen_zero_shot}, {"zero_shot_total", r.zero_shot_total},
            {"total", r.total}};
}

void write_score_dump(const StreamResult& result, const std::vector<TaskId>& tasks, const fs::path& path) {
    auto out = open_out(path);
    out << "eval_task,sample_id,reference";
    for (TaskId t : tasks) out << ",score_" << t;
    out << ",route\n";
    for (const ScoreRecord& r : result.final_scores) {
        out << r.eval_task << "," << r.sample_id << "," << (r.reference ? fmt(*r.reference, "%.9g") : "");
        for (double s : r.scores) out << "," << fmt(s, "%.9g");
        out << "," << (r.route ? std::to_string(*r.route) : "zero_shot") << "\n";
    }
}

void write_feature_dump(const DdasBank& bank, const TaskStream& stream, const fs::path& path) {
    auto out = open_out(path);
    out << "eval_task,sample_id";
    for (std::size_t d = 0; d < bank.feature_dim(); ++d) out << ",f" << d;
    out << "\n";
    for (const Task& task : stream.tasks) {
        for (std::size_t n = 0; n < task.eval.size(); ++n) {
            out << task.id << "," << task.eval.sample_ids[n];
            for (double v : bank.feature(task.eval.image(n))) out << "," << fmt(v, "%.9g");
            out << "\n";
        }
    }
}

struct MtilOutcome {
    StreamResult result;
    MetricReport report;
};

MtilOutcome run_mtil(const RunConfig& config, const fs::path& dir, const std::vector<double>& grid,
                     const ProgressFn& progress, RunSummary& summary) {
    PretrainedState state = load_pretrained(config);
    TaskStream stream = make_stream(config);
    const TrainConfig train = config.effective_train();
    if (train.mode == Mode::FewShot) {
        const std::uint64_t s = derive_seed(config.seed, "fewshot");
        for (Task& t : stream.tasks) t = few_shot_subsample(t, train.shots, derive_seed(s, t.id));
    }
    ContinualModel model(state.backbone, config.moe, config.ddas, config.seed,
                         make_feature_source(config, state.backbone));
    try {
        model.ddas().load(state.container);
    } catch (const Error& e) {
        throw Error(ErrorKind::Config, "checkpoint reference autoencoder does not fit the configured features: " +
                                           std::string(e.what()));
    }
    StreamOptions options;
    options.threshold_grid = grid;
    options.progress = progress;
    StreamResult result = run_stream(model, stream, train, options);
    const MetricReport report = aggregate(result.matrix);

    result.matrix.write_csv(dir / "matrix.csv");
    write_metrics_json(result.matrix, report, dir / "metrics.json");
    const std::array<const MoeAdapter*, 2> adapters{&model.image_adapter(), &model.text_adapter()};
    export_activation_heatmap(adapters, dir / "activations.csv");
    write_score_dump(result, model.ddas().tasks(), dir / "ddas_scores.csv");
    write_feature_dump(model.ddas(), stream, dir / "ddas_features.csv");

    ordered_json routing;
    routing["threshold"] = model.ddas().threshold();
    routing["final_row"] = routing_json(result.final_routing);
    ordered_json tasks = ordered_json::array();
    for (const TaskReport& t : result.tasks) {
        tasks.push_back({{"task", t.task},
                         {"final_loss", t.final_loss},
                         {"train_accuracy", t.train_accuracy},
                         {"ddas_loss", t.ddas_loss},
                         {"threshold", t.threshold},
                         {"frozen_image", t.frozen_image},
                         {"frozen_text", t.frozen_text}});
    }
    routing["tasks"] = tasks;
    open_out(dir / "routing.json") << routing.dump(2) << "\n";

    Container checkpoint;
    model.save(checkpoint);
    checkpoint.save(dir / "checkpoint.mclb");

    if (config.baseline) {
        const auto& moe = config.moe;
        const BaselineResult base =
            run_baseline_shared_adapter(state.backbone, stream, train, moe.rank, moe.expert_init_std, progress);
        const MetricReport base_report = aggregate(base.matrix);
        base.matrix.write_csv(dir / "baseline_matrix.csv");
        write_metrics_json(base.matrix, base_report, dir / "baseline_metrics.json");
        summary.baseline = base_report;
    }
    summary.metrics = report;
    return {std::move(result), report};
}

void run_cil_mode(const RunConfig& config, const fs::path& dir, const ProgressFn& progress, RunSummary& summary) {
    PretrainedState state = load_pretrained(config);
    TaskStream stream;
    if (config.stream.path.empty()) {
        RunConfig single = config;
        single.stream.layout.tasks = 1;
        single.stream.layout.classes_per_task = config.cil.classes;
        stream = make_stream(single);
    } else {
        stream = load_stream(config.stream.path);
    }
    if (stream.tasks.empty()) throw Error(ErrorKind::EmptyInput, "class-incremental run needs a task");
    state.backbone.text().register_catalog(stream.names);
    const auto steps = split_class_incremental(stream.tasks.front(), config.cil.steps);

    TrainConfig train = config.effective_train();
    train.batch = config.cil.batch;
    train.label_smoothing = config.cil.label_smoothing;
    train.weight_decay = config.cil.weight_decay;
    MoeConfig moe = config.moe;
    moe.experts = config.cil.experts;
    moe.top_k = config.cil.top_k;

    const CilResult result = run_cil(state.backbone, steps, moe, train, progress, config.cil.freeze_steps);
    std::optional<CilResult> naive;
    if (config.cil.naive_baseline) {
        naive = run_cil_naive(state.backbone, steps, moe.rank, moe.expert_init_std, train, progress);
    }
    auto out = open_out(dir / "cil_steps.csv");
    out << "step,classes,accuracy" << (naive ? ",naive_accuracy" : "") << "\n";
    for (std::size_t s = 0; s < result.report.steps.size(); ++s) {
        std::size_t seen = 0;
        for (std::size_t k = 0; k <= s; ++k) seen += result.step_classes[k].size();
        out << s + 1 << "," << seen << "," << fmt(result.report.steps[s]);
        if (naive) out << "," << fmt(naive->report.steps[s]);
        out << "\n";
    }
    write_cil_json(result.report, dir / "metrics.json");
    summary.cil = result.report;
    if (naive) {
        write_cil_json(naive->report, dir / "naive_metrics.json");
        summary.naive_cil = naive->report;
    }
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    if (rows.empty()) throw Error(ErrorKind::Format, path.string() + " is empty");
    return rows;
}

double to_double(const std::string& s, const fs::path& path) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::Format, path.string() + ": '" + s + "' is not a number");
    }
}

}  // namespace

fs::path checkpoint_path(const RunConfig& config) {
    if (!config.checkpoint.empty()) return config.checkpoint;
    return output_root() / "pretrain" / "checkpoint.mclb";
}

fs::path run_directory(const RunConfig& config) {
    if (!config.output_dir.empty()) return config.output_dir;
    return output_root() / (to_string(config.train.mode) + "-seed" + std::to_string(config.seed));
}

SyntheticWorld make_world(const RunConfig& config) { return SyntheticWorld(config.stream.world, config.stream.data_seed); }

TaskStream make_stream(const RunConfig& config) {
    if (!config.stream.path.empty()) return load_stream(config.stream.path);
    const SyntheticWorld world = make_world(config);
    const auto specs = world.default_specs(config.stream.layout, derive_seed(config.stream.data_seed, "specs"));
    return world.generate_stream(specs, derive_seed(config.stream.data_seed, "stream"));
}

PretrainResult cmd_pretrain(const RunConfig& config, const ProgressFn& progress) {
    config.validate();
    const fs::path path = checkpoint_path(config);
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw Error(ErrorKind::Io, "cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    const SyntheticWorld world = make_world(config);
    const ReferenceSet reference = world.generate_reference(derive_seed(config.stream.data_seed, "reference"),
                                                            config.reference);
    Backbone backbone(config.effective_geometry(), derive_seed(config.seed, "backbone"), config.logit_scale);
    PretrainConfig pc = config.pretrain;
    pc.seed = derive_seed(config.seed, "pretrain");
    PretrainResult result;
    result.report = pretrain_backbone(backbone, reference, pc);
    if (progress) {
        progress("pretrain: loss " + fmt(result.report.initial_loss, "%.4f") + " -> " +
                 fmt(result.report.final_loss, "%.4f") + ", held-out zero-shot " +
                 fmt(result.report.heldout_zero_shot, "%.1f") + "%");
    }

    DdasBank bank(config.ddas, make_feature_source(config, backbone));
    std::vector<Feature> features;
    for (std::size_t i = 0; i < reference.pretext.size(); ++i) features.push_back(bank.feature(reference.pretext.image(i)));
    bank.train_autoencoder(0, features, config.ddas.reference_iterations, derive_seed(config.seed, "reference-ae"));
    result.reference_score = bank.mean_score(0, features);

    Container c;
    backbone.save(c);
    bank.save(c);
    put_seed(c, "pretrain/data_seed", config.stream.data_seed);
    c.put("pretrain/features", {1}, {config.ddas_features == FeatureKind::Backbone ? 0.0 : 1.0});
    c.put("pretrain/heldout_zero_shot", {1}, {result.report.heldout_zero_shot});
    c.save(path);
    write_run_config(config, path.parent_path() / "config.json");
    result.checkpoint = path;
    return result;
}

PretrainedState load_pretrained(const RunConfig& config) {
    const fs::path path = checkpoint_path(config);
    if (!fs::exists(path)) {
        throw Error(ErrorKind::Io, "checkpoint " + path.string() + " not found; run 'moecl pretrain' first");
    }
    Container c = Container::load(path);
    Backbone backbone = Backbone::load(c);
    if (!(backbone.geometry() == config.effective_geometry())) {
        throw Error(ErrorKind::Config, "checkpoint geometry differs from the configured backbone");
    }
    if (c.contains("pretrain/data_seed") && get_seed(c, "pretrain/data_seed") != config.stream.data_seed) {
        throw Error(ErrorKind::Config, "checkpoint was pretrained for a different stream.data_seed");
    }
    if (c.contains("pretrain/features")) {
        const bool backbone_features = c.get("pretrain/features").values.at(0) == 0.0;
        if (backbone_features != (config.ddas_features == FeatureKind::Backbone)) {
            throw Error(ErrorKind::Config, "checkpoint reference autoencoder used a different ddas.features");
        }
    }
    return {std::move(backbone), std::move(c)};
}

RunSummary cmd_run(const RunConfig& config, const ProgressFn& progress) {
    config.validate();
    RunSummary summary;
    summary.dir = run_directory(config);
    std::error_code ec;
    fs::create_directories(summary.dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + summary.dir.string() + ": " + ec.message());
    write_run_config(config, summary.dir / "config.json");
    if (config.train.mode == Mode::Cil) {
        run_cil_mode(config, summary.dir, progress, summary);
    } else {
        summary.stream = run_mtil(config, summary.dir, {}, progress, summary).result;
    }
    return summary;
}

std::string to_string(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Threshold: return "threshold";
        case SweepAxis::Experts: return "experts";
        case SweepAxis::TopK: return "k";
    }
    return "threshold";
}

SweepAxis sweep_axis_from_string(const std::string& name) {
    if (name == "threshold") return SweepAxis::Threshold;
    if (name == "experts") return SweepAxis::Experts;
    if (name == "k") return SweepAxis::TopK;
    throw Error(ErrorKind::Config, "unknown sweep axis '" + name + "' (expected threshold, experts or k)");
}

std::vector<SweepRow> cmd_sweep(const RunConfig& config, SweepAxis axis, const std::vector<double>& grid,
                                const ProgressFn& progress) {
    config.validate();
    if (grid.empty()) throw Error(ErrorKind::Config, "sweep grid is empty");
    if (config.train.mode == Mode::Cil) throw Error(ErrorKind::Config, "sweeps run in mtil or fewshot mode");
    const fs::path dir = run_directory(config);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    write_run_config(config, dir / "config.json");

    auto rate = [](std::size_t part, std::size_t whole) {
        return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
    };
    std::vector<SweepRow> rows;
    if (axis == SweepAxis::Threshold) {
        RunSummary summary;
        MtilOutcome outcome = run_mtil(config, dir, grid, progress, summary);
        for (const ThresholdRow& t : outcome.result.sweep) {
            const MetricReport r = aggregate(t.matrix);
            rows.push_back({t.threshold, r.transfer_mean, r.average_mean, r.last_mean,
                            rate(t.routing.zero_shot_total, t.routing.total),
                            rate(t.routing.routed_to_own, t.routing.seen_samples)});
        }
    } else {
        for (double v : grid) {
            if (v < 1.0 || v != std::floor(v)) throw Error(ErrorKind::Config, "sweep values for this axis are positive integers");
            RunConfig point = config;
            const auto n = static_cast<std::size_t>(v);
            (axis == SweepAxis::Experts ? point.moe.experts : point.moe.top_k) = n;
            point.output_dir = (dir / (to_string(axis) + "-" + std::to_string(n))).string();
            point.validate();
            fs::create_directories(point.output_dir);
            write_run_config(point, fs::path(point.output_dir) / "config.json");
            RunSummary summary;
            MtilOutcome outcome = run_mtil(point, point.output_dir, {}, progress, summary);
            const RoutingSummary& r = outcome.result.final_routing;
            rows.push_back({v, outcome.report.transfer_mean, outcome.report.average_mean, outcome.report.last_mean,
                            rate(r.zero_shot_total, r.total), rate(r.routed_to_own, r.seen_samples)});
            if (progress) progress(to_string(axis) + " " + std::to_string(n) + ": last " + fmt(outcome.report.last_mean, "%.2f"));
        }
    }
    auto out = open_out(dir / ("sweep_" + to_string(axis) + ".csv"));
    out << to_string(axis) << ",transfer,average,last,zero_shot_rate,task_rate\n";
    for (const SweepRow& r : rows) {
        out << (axis == SweepAxis::Threshold ? fmt(r.value, "%.6g") : std::to_string(static_cast<std::size_t>(r.value)))
            << "," << (r.transfer ? fmt(*r.transfer, "%.4f") : "") << "," << fmt(r.average, "%.4f") << ","
            << fmt(r.last, "%.4f") << "," << fmt(r.zero_shot_rate, "%.4f") << "," << fmt(r.task_rate, "%.4f") << "\n";
    }
    return rows;
}

void cmd_report(const fs::path& dir, std::ostream& out) {
    if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "report: " + dir.string() + " is not a directory");
    bool rendered = false;

    auto print_matrix = [&](const fs::path& csv, const std::string& label, const std::string& stem) {
        const EvalMatrix m = EvalMatrix::read_csv(csv);
        out << label << " (row i: after training task i)\n";
        out << "after";
        for (const auto& n : m.names()) out << "\t" << n;
        out << "\n";
        std::vector<std::vector<double>> values;
        std::vector<std::string> rows;
        std::vector<Series> curves(m.size());
        for (std::size_t j = 1; j <= m.size(); ++j) curves[j - 1].name = m.names()[j - 1];
        for (std::size_t i = 1; i <= m.size(); ++i) {
            bool any = false;
            std::vector<double> row;
            for (std::size_t j = 1; j <= m.size(); ++j) {
                row.push_back(m.filled(i, j) ? m.at(i, j) : std::nan(""));
                any = any || m.filled(i, j);
            }
            if (!any) continue;
            rows.push_back(std::to_string(i));
            out << i;
            for (std::size_t j = 1; j <= m.size(); ++j) {
                out << "\t" << (m.filled(i, j) ? fmt(m.at(i, j), "%.1f") : "-");
                if (m.filled(i, j)) {
                    curves[j - 1].x.push_back(static_cast<double>(i));
                    curves[j - 1].y.push_back(m.at(i, j));
                }
            }
            out << "\n";
            values.push_back(std::move(row));
        }
        if (m.complete()) {
            const MetricReport r = aggregate(m);
            out << "Transfer " << (r.transfer_mean ? fmt(*r.transfer_mean, "%.1f") : std::string("n/a")) << "\n";
            out << "Average " << fmt(r.average_mean, "%.1f") << "\n";
            out << "Last " << fmt(r.last_mean, "%.1f") << "\n";
        } else {
            out << "(matrix incomplete; aggregates need every row)\n";
        }
        write_heatmap(dir / (stem + "_heatmap.svg"), label, rows, m.names(), values, 0.0, 100.0, true);
        write_line_chart(dir / (stem + "_curves.svg"), label + " per task", "after task", "accuracy (%)", curves);
    };

    if (fs::exists(dir / "matrix.csv")) {
        print_matrix(dir / "matrix.csv", "Accuracy matrix", "matrix");
        rendered = true;
    }
    if (fs::exists(dir / "baseline_matrix.csv")) {
        out << "\n";
        print_matrix(dir / "baseline_matrix.csv", "Shared-adapter baseline", "baseline");
    }
    if (fs::exists(dir / "cil_steps.csv")) {
        const auto rows = read_csv_rows(dir / "cil_steps.csv");
        std::vector<Series> series{{"moe", {}, {}}};
        if (rows[0].size() > 3) series.push_back({"naive", {}, {}});
        out << "Class-incremental steps\nstep\tclasses\taccuracy" << (rows[0].size() > 3 ? "\tnaive" : "") << "\n";
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            const double step = to_double(row.at(0), dir / "cil_steps.csv");
            for (std::size_t s = 0; s < series.size(); ++s) {
                series[s].x.push_back(step);
                series[s].y.push_back(to_double(row.at(2 + s), dir / "cil_steps.csv"));
            }
            out << row[0] << "\t" << row[1];
            for (std::size_t s = 0; s < series.size(); ++s) out << "\t" << fmt(series[s].y.back(), "%.1f");
            out << "\n";
        }
        const CilReport moe = cil_aggregate(series[0].y);
        out << "Avg " << fmt(moe.average, "%.1f") << "\nLast " << fmt(moe.last, "%.1f") << "\n";
        if (series.size() > 1) {
            const CilReport naive = cil_aggregate(series[1].y);
            out << "Naive Avg " << fmt(naive.average, "%.1f") << "\nNaive Last " << fmt(naive.last, "%.1f") << "\n";
        }
        write_line_chart(dir / "cil_curve.svg", "Class-incremental accuracy", "step", "accuracy (%)", series);
        rendered = true;
    }
    if (!rendered) throw Error(ErrorKind::Io, "report: no matrix.csv or cil_steps.csv in " + dir.string());

    if (fs::exists(dir / "activations.csv")) {
        const auto rows = read_csv_rows(dir / "activations.csv");
        std::map<std::string, std::map<std::size_t, double>> grid;
        std::size_t experts = 0;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (row.size() < 6) throw Error(ErrorKind::Format, "activations.csv: short row");
            const std::string key = row[0] + "/b" + row[1] + "/t" + row[2];
            const auto e = static_cast<std::size_t>(to_double(row[3], dir / "activations.csv"));
            grid[key][e] = to_double(row[5], dir / "activations.csv");
            experts = std::max(experts, e + 1);
        }
        std::vector<std::string> names, cols;
        std::vector<std::vector<double>> values;
        for (std::size_t e = 0; e < experts; ++e) cols.push_back(std::to_string(e));
        for (const auto& [key, freq] : grid) {
            names.push_back(key);
            std::vector<double> row(experts, 0.0);
            for (const auto& [e, f] : freq) row[e] = f;
            values.push_back(std::move(row));
        }
        write_heatmap(dir / "activations_heatmap.svg", "Expert selection frequency", names, cols, values, 0.0, 1.0, false);
    }
    for (const std::string axis : {"threshold", "experts", "k"}) {
        const fs::path csv = dir / ("sweep_" + axis + ".csv");
        if (!fs::exists(csv)) continue;
        const auto rows = read_csv_rows(csv);
        std::vector<Series> series{{"average", {}, {}}, {"last", {}, {}}, {"zero-shot rate", {}, {}}};
        out << "\nSweep over " << axis << "\n" << axis << "\ttransfer\taverage\tlast\tzero_shot_rate\n";
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            const double x = to_double(row.at(0), csv);
            series[0].x.push_back(x), series[0].y.push_back(to_double(row.at(2), csv));
            series[1].x.push_back(x), series[1].y.push_back(to_double(row.at(3), csv));
            series[2].x.push_back(x), series[2].y.push_back(to_double(row.at(4), csv));
            out << row[0] << "\t" << (row[1].empty() ? "-" : row[1]) << "\t" << row[2] << "\t" << row[3] << "\t"
                << row[4] << "\n";
        }
        write_line_chart(dir / ("sweep_" + axis + ".svg"), "Sweep over " + axis, axis, "percent", series);
    }
}

}  // namespace moecl
