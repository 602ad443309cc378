#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "moecl/error.hpp"
#include "moecl/metrics.hpp"

using namespace moecl;
namespace fs = std::filesystem;

namespace {

EvalMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    EvalMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows.size(); ++j) m.record(i + 1, j + 1, rows[i][j]);
    return m;
}

}  // namespace

TEST_CASE("record rules") {
    EvalMatrix m(2);
    m.record(1, 1, 80);
    CHECK(m.at(1, 1) == 80.0);
    CHECK_THROWS_AS(m.record(1, 1, 70), Error);
    CHECK_THROWS_AS(m.record(1, 2, 101), Error);
    CHECK_THROWS_AS(m.record(1, 2, -0.1), Error);
    CHECK_THROWS_AS(m.record(3, 1, 50), Error);
    CHECK_THROWS_AS(m.record(0, 1, 50), Error);
    CHECK_THROWS_AS(aggregate(m), Error);
    CHECK_THROWS_AS(aggregate(EvalMatrix(0)), Error);
}

TEST_CASE("three-task hand example") {
    const MetricReport r = aggregate(from_rows({{50, 10, 10}, {60, 70, 20}, {55, 65, 80}}));
    REQUIRE(r.transfer_mean.has_value());
    CHECK(*r.transfer_mean == doctest::Approx(12.5).epsilon(1e-12));
    CHECK(r.last_mean == doctest::Approx(200.0 / 3).epsilon(1e-12));
    CHECK(r.average_mean == doctest::Approx(420.0 / 9).epsilon(1e-12));
    CHECK_FALSE(r.transfer[0].has_value());
    CHECK(*r.transfer[1] == 10.0);
    CHECK(*r.transfer[2] == 15.0);
    CHECK(r.average[0] == doctest::Approx(55.0));
}

TEST_CASE("single task and constant matrices") {
    const MetricReport one = aggregate(from_rows({{73}}));
    CHECK_FALSE(one.transfer_mean.has_value());
    CHECK(one.average_mean == 73.0);
    CHECK(one.last_mean == 73.0);

    const MetricReport c = aggregate(from_rows(std::vector<std::vector<double>>(4, std::vector<double>(4, 42.0))));
    CHECK(*c.transfer_mean == doctest::Approx(42.0));
    CHECK(c.average_mean == doctest::Approx(42.0));
    CHECK(c.last_mean == doctest::Approx(42.0));
}

TEST_CASE("published matrix fixture") {
    const EvalMatrix m = EvalMatrix::read_csv(fs::path(MOECL_FIXTURE_DIR) / "published_mtil_matrix.csv");
    CHECK(m.size() == 11);
    CHECK(m.names().front() == "Aircraft");
    const MetricReport r = aggregate(m);
    CHECK(std::abs(*r.transfer_mean - 68.9) <= 0.05);
    CHECK(std::abs(r.average_mean - 76.7) <= 0.05);
    CHECK(std::abs(r.last_mean - 85.0) <= 0.05);
    // per-task rows printed in the published table
    CHECK(std::abs(*r.transfer[3] - 44.4) <= 0.05);
    CHECK(std::abs(r.average[4] - 78.9) <= 0.05);
}

TEST_CASE("aggregates are bounded and invariant to column order") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(0, 100);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = 2 + gen() % 6;
        std::vector<std::vector<double>> rows(t, std::vector<double>(t));
        for (auto& row : rows)
            for (double& v : row) v = u(gen);
        const MetricReport r = aggregate(from_rows(rows));
        auto bounded = [](double v, const std::vector<double>& parts) {
            return v >= *std::min_element(parts.begin(), parts.end()) - 1e-9 &&
                   v <= *std::max_element(parts.begin(), parts.end()) + 1e-9;
        };
        CHECK(bounded(r.average_mean, r.average));
        CHECK(bounded(r.last_mean, r.last));

        // Re-recording a row's cells in a different order cannot change anything.
        EvalMatrix shuffled(t);
        for (std::size_t i = 0; i < t; ++i) {
            std::vector<std::size_t> order(t);
            for (std::size_t j = 0; j < t; ++j) order[j] = j;
            std::shuffle(order.begin(), order.end(), gen);
            for (std::size_t j : order) shuffled.record(i + 1, j + 1, rows[i][j]);
        }
        const MetricReport s = aggregate(shuffled);
        CHECK(s.average_mean == r.average_mean);
        CHECK(*s.transfer_mean == *r.transfer_mean);
    }
}

TEST_CASE("cil_aggregate") {
    const std::vector<double> one{80};
    CHECK(cil_aggregate(one).average == 80.0);
    CHECK(cil_aggregate(one).last == 80.0);
    const std::vector<double> two{90, 70};
    CHECK(cil_aggregate(two).average == 80.0);
    CHECK(cil_aggregate(two).last == 70.0);
    CHECK_THROWS_AS(cil_aggregate(std::vector<double>{}), Error);
}

TEST_CASE("csv and json outputs") {
    const fs::path dir = fs::temp_directory_path() / "moecl_metrics_test";
    fs::create_directories(dir);
    EvalMatrix m(2, {"a", "b"});
    m.record(1, 1, 12.345);
    m.record(1, 2, 50);
    m.write_csv(dir / "partial.csv");
    {
        std::ifstream in(dir / "partial.csv");
        std::string text((std::istreambuf_iterator<char>(in)), {});
        CHECK(text == "after,a,b\na,12.3,50.0\n");
    }
    m.record(2, 1, 99.96);
    m.record(2, 2, 1);
    m.write_csv(dir / "m.csv");
    const EvalMatrix back = EvalMatrix::read_csv(dir / "m.csv");
    CHECK(back.at(2, 1) == 100.0);
    CHECK(back.names() == m.names());

    write_metrics_json(m, aggregate(m), dir / "metrics.json");
    std::ifstream in(dir / "metrics.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["matrix"][0][0].get<double>() == 12.345);
    CHECK(j["per_task"]["transfer"][0].is_null());
    CHECK(j["last"].get<double>() == doctest::Approx((99.96 + 1) / 2));

    CHECK_THROWS_AS(EvalMatrix::read_csv(dir / "missing.csv"), Error);
}
