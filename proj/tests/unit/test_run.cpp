#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "moecl/error.hpp"
#include "moecl/run.hpp"

using namespace moecl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("moecl_test_run_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig tiny(const fs::path& root) {
    RunConfig c;
    c.checkpoint = (root / "pretrain" / "checkpoint.mclb").string();
    c.pretrain.steps = 60;
    c.pretrain.batch = 16;
    c.ddas.reference_iterations = 40;
    c.ddas.task_iterations = 20;
    c.stream.layout.tasks = 2;
    c.stream.layout.classes_per_task = 3;
    c.stream.layout.train_per_class = 20;
    c.stream.layout.eval_per_class = 8;
    c.train.iterations = 12;
    c.train.batch = 8;
    c.moe.experts = 4;
    c.cil.classes = 4;
    c.cil.steps = 2;
    c.cil.batch = 8;
    return c;
}

// One pretrained checkpoint shared by the cases below.
const fs::path& pretrained_root() {
    static const fs::path root = [] {
        const fs::path r = scratch("shared");
        cmd_pretrain(tiny(r));
        return r;
    }();
    return root;
}

}  // namespace

TEST_CASE("pretrain writes a reproducible checkpoint") {
    const fs::path root = pretrained_root();
    const fs::path ckpt = root / "pretrain" / "checkpoint.mclb";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(root / "pretrain" / "config.json"));
    const fs::path again = scratch("again");
    RunConfig c = tiny(again);
    cmd_pretrain(c);
    CHECK(slurp(ckpt) == slurp(again / "pretrain" / "checkpoint.mclb"));
    const Container loaded = Container::load(ckpt);
    CHECK(loaded.contains("ddas/ae0/0"));
    fs::remove_all(again);
}

TEST_CASE("pretrain into an unwritable location fails") {
    RunConfig c = tiny(scratch("bad"));
    c.checkpoint = "/proc/moecl/checkpoint.mclb";
    CHECK_THROWS_AS(cmd_pretrain(c), Error);
}

TEST_CASE("run writes the run directory and is byte-reproducible") {
    const fs::path root = pretrained_root();
    RunConfig c = tiny(root);
    c.output_dir = (root / "run-a").string();
    const RunSummary a = cmd_run(c);
    for (const char* f : {"config.json", "matrix.csv", "metrics.json", "activations.csv", "ddas_scores.csv",
                          "ddas_features.csv", "routing.json", "checkpoint.mclb"}) {
        CHECK_MESSAGE(fs::exists(a.dir / f), f);
    }
    REQUIRE(a.metrics.has_value());
    c.output_dir = (root / "run-b").string();
    cmd_run(c);
    for (const char* f : {"matrix.csv", "metrics.json", "activations.csv", "ddas_scores.csv", "routing.json"}) {
        CHECK_MESSAGE(slurp(root / "run-a" / f) == slurp(root / "run-b" / f), f);
    }
    // the snapshot re-executes to the same result
    RunConfig snap = load_run_config(a.dir / "config.json");
    snap.output_dir = (root / "run-c").string();
    cmd_run(snap);
    CHECK(slurp(root / "run-a" / "matrix.csv") == slurp(root / "run-c" / "matrix.csv"));
}

TEST_CASE("single task run gives a 1x1 matrix") {
    const fs::path root = pretrained_root();
    RunConfig c = tiny(root);
    c.stream.layout.tasks = 1;
    c.output_dir = (root / "single").string();
    const RunSummary s = cmd_run(c);
    REQUIRE(s.metrics.has_value());
    CHECK_FALSE(s.metrics->transfer_mean.has_value());
    CHECK(s.metrics->average_mean == s.metrics->last_mean);
    CHECK(EvalMatrix::read_csv(s.dir / "matrix.csv").size() == 1);
}

TEST_CASE("few-shot and class-incremental modes") {
    const fs::path root = pretrained_root();
    RunConfig few = tiny(root);
    few.train.mode = Mode::FewShot;
    few.train.shots = 5;
    few.output_dir = (root / "few").string();
    CHECK(cmd_run(few).metrics.has_value());

    RunConfig cil = tiny(root);
    cil.train.mode = Mode::Cil;
    cil.output_dir = (root / "cil").string();
    const RunSummary s = cmd_run(cil);
    REQUIRE(s.cil.has_value());
    REQUIRE(s.naive_cil.has_value());
    CHECK(s.cil->steps.size() == 2);
    CHECK(fs::exists(s.dir / "cil_steps.csv"));
    std::ostringstream out;
    cmd_report(s.dir, out);
    CHECK(out.str().find("Avg") != std::string::npos);
    CHECK(fs::exists(s.dir / "cil_curve.svg"));
}

TEST_CASE("missing checkpoint and mismatched geometry") {
    const fs::path root = pretrained_root();
    RunConfig c = tiny(root);
    c.checkpoint = (root / "nowhere.mclb").string();
    c.output_dir = (root / "missing").string();
    CHECK_THROWS_AS(cmd_run(c), Error);
    RunConfig g = tiny(root);
    g.geometry.width = 16;
    g.geometry.embed_dim = 16;
    g.output_dir = (root / "geometry").string();
    CHECK_THROWS_AS(cmd_run(g), Error);
}

TEST_CASE("sweeps") {
    const fs::path root = pretrained_root();
    RunConfig c = tiny(root);
    c.output_dir = (root / "sweep-t").string();
    CHECK_THROWS_AS(cmd_sweep(c, SweepAxis::Threshold, {}), Error);
    const auto one = cmd_sweep(c, SweepAxis::Threshold, {0.5});
    CHECK(one.size() == 1);
    const auto rows = cmd_sweep(c, SweepAxis::Threshold, {0.0, 0.5, 100.0});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].zero_shot_rate == 100.0);
    CHECK(rows[2].zero_shot_rate == 0.0);
    CHECK(fs::exists(root / "sweep-t" / "sweep_threshold.csv"));

    c.output_dir = (root / "sweep-e").string();
    const auto experts = cmd_sweep(c, SweepAxis::Experts, {2, 3});
    CHECK(experts.size() == 2);
    CHECK(fs::exists(root / "sweep-e" / "experts-3" / "matrix.csv"));
    CHECK_THROWS_AS(cmd_sweep(c, SweepAxis::TopK, {1.5}), Error);
    CHECK(sweep_axis_from_string("k") == SweepAxis::TopK);
    CHECK_THROWS_AS(sweep_axis_from_string("depth"), Error);
}

TEST_CASE("report of the published matrix fixture") {
    const fs::path dir = scratch("report");
    fs::copy_file(fs::path(MOECL_FIXTURE_DIR) / "published_mtil_matrix.csv", dir / "matrix.csv");
    std::ostringstream out;
    cmd_report(dir, out);
    CHECK(out.str().find("Transfer 68.9") != std::string::npos);
    CHECK(out.str().find("Average 76.7") != std::string::npos);
    CHECK(out.str().find("Last 85.0") != std::string::npos);
    CHECK(fs::exists(dir / "matrix_heatmap.svg"));
    CHECK(fs::exists(dir / "matrix_curves.svg"));
    fs::remove_all(dir);
}

TEST_CASE("report without data files fails") {
    const fs::path dir = scratch("empty");
    std::ostringstream out;
    CHECK_THROWS_AS(cmd_report(dir, out), Error);
    CHECK_THROWS_AS(cmd_report(dir / "absent", out), Error);
    fs::remove_all(dir);
}
