#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "moecl/data.hpp"
#include "moecl/error.hpp"

using namespace moecl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("moecl_test_data_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TaskStream small_stream(std::uint64_t seed, std::size_t tasks = 3) {
    SyntheticWorld world({}, 1);
    StreamLayout layout;
    layout.tasks = tasks;
    layout.train_per_class = 20;
    layout.eval_per_class = 10;
    const auto specs = world.default_specs(layout, seed);
    return world.generate_stream(specs, seed);
}

double mean_sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

TEST_CASE("generate_stream is deterministic and globally labelled") {
    const TaskStream a = small_stream(5);
    const TaskStream b = small_stream(5);
    CHECK(a == b);
    CHECK_FALSE(a == small_stream(6));

    std::set<ClassId> seen;
    for (const Task& t : a.tasks) {
        CHECK(t.train.size() == 4 * 20);
        CHECK(t.eval.size() == 4 * 10);
        for (ClassId c : t.classes) {
            CHECK(seen.insert(c).second);
            CHECK(a.names.contains(c));
        }
        for (ClassId y : t.train.labels) CHECK(std::find(t.classes.begin(), t.classes.end(), y) != t.classes.end());
        std::set<std::uint64_t> train_ids(t.train.sample_ids.begin(), t.train.sample_ids.end());
        for (std::uint64_t id : t.eval.sample_ids) CHECK_FALSE(train_ids.contains(id));
    }
    for (std::size_t i = 1; i < a.tasks.size(); ++i) CHECK(a.tasks[i].id > a.tasks[i - 1].id);
}

TEST_CASE("default specs place domain shifts at the requested distance") {
    SyntheticWorld world({}, 1);
    StreamLayout layout;
    layout.separation = 6.0;
    layout.noise = 0.5;
    const auto specs = world.default_specs(layout, 3);
    REQUIRE(specs.size() == 5);
    for (std::size_t i = 0; i < specs.size(); ++i)
        for (std::size_t j = i + 1; j < specs.size(); ++j)
            CHECK(std::sqrt(mean_sq_dist(specs[i].domain_shift, specs[j].domain_shift)) ==
                  doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("generate_stream edge cases") {
    SyntheticWorld world({}, 1);
    SyntheticTaskSpec spec;
    spec.id = 1;
    spec.classes = 1;
    spec.train_per_class = 3;
    spec.eval_per_class = 2;
    const TaskStream one = world.generate_stream(std::vector{spec}, 0);
    CHECK(one.tasks.at(0).classes.size() == 1);

    std::vector<SyntheticTaskSpec> dup{spec, spec};
    CHECK_THROWS_AS(world.generate_stream(dup, 0), Error);
    CHECK_THROWS_AS(world.generate_stream(std::vector<SyntheticTaskSpec>{}, 0), Error);
}

TEST_CASE("reference set is broader and disjoint from task classes") {
    SyntheticWorld world({}, 1);
    const ReferenceSet ref = world.generate_reference(9, {});
    const TaskStream stream = small_stream(5);
    for (ClassId c : ref.pretext_classes) CHECK(c >= kPretextClassBase);
    for (ClassId c : ref.heldout_classes) {
        CHECK(c >= kPretextClassBase);
        CHECK(std::find(ref.pretext_classes.begin(), ref.pretext_classes.end(), c) == ref.pretext_classes.end());
    }

    auto variance = [](const LabeledSet& s) {
        const std::size_t w = s.sample_width();
        std::vector<double> mu(w, 0.0);
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = 0; j < w; ++j) mu[j] += s.sample(i)[j] / double(s.size());
        double v = 0;
        for (std::size_t i = 0; i < s.size(); ++i) v += mean_sq_dist(s.sample(i), mu);
        return v / double(s.size());
    };
    double task_max = 0;
    for (const Task& t : stream.tasks) task_max = std::max(task_max, variance(t.train));
    CHECK(variance(ref.pretext) > task_max);
    CHECK(ref.names.size() == ref.pretext_classes.size() + ref.heldout_classes.size());

    const ReferenceSet again = world.generate_reference(9, {});
    CHECK(again.pretext == ref.pretext);
}

TEST_CASE("probe samples sit far from every task shift") {
    SyntheticWorld world({}, 1);
    StreamLayout layout;
    const auto specs = world.default_specs(layout, 3);
    const LabeledSet probe = world.generate_probe(specs, 10.0, 50, 4);
    CHECK(probe.size() == 50);
    CHECK(probe == world.generate_probe(specs, 10.0, 50, 4));
    for (ClassId c : probe.labels) CHECK(c >= kPretextClassBase);
}

TEST_CASE("few_shot_subsample") {
    const TaskStream s = small_stream(2, 1);
    const Task& t = s.tasks[0];
    const Task five = few_shot_subsample(t, 5, 11);
    CHECK(five.train.size() == 5 * t.classes.size());
    for (ClassId c : t.classes) CHECK(std::count(five.train.labels.begin(), five.train.labels.end(), c) == 5);
    CHECK(five.eval == t.eval);
    CHECK(few_shot_subsample(t, 5, 11) == five);
    CHECK(few_shot_subsample(t, 20, 3) == t);
    CHECK_THROWS_AS(few_shot_subsample(t, 21, 3), Error);
    CHECK_THROWS_AS(few_shot_subsample(t, 0, 3), Error);
}

TEST_CASE("split_class_incremental") {
    SyntheticWorld world({}, 1);
    SyntheticTaskSpec spec;
    spec.id = 1;
    spec.classes = 10;
    spec.train_per_class = 4;
    spec.eval_per_class = 2;
    const TaskStream s = world.generate_stream(std::vector{spec}, 0);
    const auto steps = split_class_incremental(s.tasks[0], 5);
    REQUIRE(steps.size() == 5);
    std::set<ClassId> all;
    for (const Task& st : steps) {
        CHECK(st.classes.size() == 2);
        CHECK(st.train.size() == 8);
        for (ClassId c : st.classes) CHECK(all.insert(c).second);
    }
    CHECK_THROWS_AS(split_class_incremental(s.tasks[0], 11), Error);
}

TEST_CASE("MCLD1 round trip and corruption") {
    const fs::path dir = scratch_dir("mcld");
    const TaskStream s = small_stream(8, 2);
    const fs::path file = dir / "a.mcld";
    save_dataset(s.tasks[0].train, file);
    CHECK(load_dataset(file) == s.tasks[0].train);

    save_stream(s, dir / "stream");
    CHECK(load_stream(dir / "stream") == s);

    {
        std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXX", 5);
    }
    try {
        load_dataset(file);
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Format);
    }

    save_dataset(s.tasks[0].train, file);
    fs::resize_file(file, fs::file_size(file) - 9);
    CHECK_THROWS_AS(load_dataset(file), Error);

    save_dataset(s.tasks[0].train, file);
    fs::resize_file(file, fs::file_size(file) + 8);
    CHECK_THROWS_AS(load_dataset(file), Error);

    CHECK_THROWS_AS(load_dataset(dir / "missing.mcld"), Error);
}
