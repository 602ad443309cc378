#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "moecl/ddas.hpp"
#include "moecl/error.hpp"

using namespace moecl;

namespace {

// Features near a task-specific offset, low-dimensional inside 16 dims.
std::vector<Feature> cluster(Rng& rng, double offset, std::size_t n) {
    std::vector<Feature> out;
    for (std::size_t i = 0; i < n; ++i) {
        Feature f(16, 0.0);
        const double a = rng.normal(0, 1), b = rng.normal(0, 1);
        for (std::size_t j = 0; j < 16; ++j) f[j] = offset * ((j % 4 == std::size_t(offset) % 4) ? 1.0 : 0.2) + a * 0.3 * (j % 2) + b * 0.3 * (1 - j % 2) + rng.normal(0, 0.05);
        out.push_back(f);
    }
    return out;
}

class FixedSource : public FeatureSource {
   public:
    std::size_t dim() const override { return 16; }
    Feature extract(const Tensor& image) const override {
        Feature f(16, 0.0);
        for (std::size_t i = 0; i < image.numel(); ++i) f[i % 16] += image.at(i);
        return f;
    }
};

DdasBank make_bank(DdasConfig cfg = {}) { return DdasBank(cfg, std::make_shared<FixedSource>()); }

}  // namespace

TEST_CASE("select examples") {
    const std::vector<TaskId> ids{1, 2};
    CHECK(route_scores(ids, std::vector<double>{0.9, 0.8}, 0.065).zero_shot());
    const RoutingDecision d = route_scores(ids, std::vector<double>{0.02, 0.5}, 0.065);
    CHECK(d.kind == RoutingDecision::Kind::Task);
    CHECK(d.task == 1);
    CHECK(route_scores(ids, std::vector<double>{0.03, 0.03}, 0.065).task == 1);
    // equality is not "surpassing"
    CHECK(route_scores(ids, std::vector<double>{0.5, 0.065}, 0.065).task == 2);
    CHECK(route_scores(ids, std::vector<double>{0.5, 0.0}, 0.0).task == 2);
    CHECK(route_scores(ids, std::vector<double>{0.5, 1e-9}, 0.0).zero_shot());
    CHECK_THROWS_AS(route_scores(ids, std::vector<double>{}, 0.1), Error);
}

TEST_CASE("routing dichotomy on random scores") {
    Rng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.index(6);
        std::vector<TaskId> ids(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            ids[i] = TaskId(i + 1);
            s[i] = std::abs(rng.normal(0, 1));
        }
        const double thres = std::abs(rng.normal(0, 1));
        const RoutingDecision d = route_scores(ids, s, thres);
        const double lo = *std::min_element(s.begin(), s.end());
        if (d.zero_shot()) {
            for (double v : s) CHECK(v > thres);
        } else {
            CHECK(s[d.task - 1] == lo);
            CHECK(s[d.task - 1] <= thres);
        }
    }
}

TEST_CASE("nearest-rank quantile") {
    const std::vector<double> v{5, 1, 4, 2, 3, 9, 7, 8, 6, 10};
    CHECK(nearest_rank_quantile(v, 1.0) == 10);
    CHECK(nearest_rank_quantile(v, 0.0) == 1);
    CHECK(nearest_rank_quantile(v, 0.95) == 10);
    CHECK(nearest_rank_quantile(v, 0.5) == 5);
    CHECK(nearest_rank_quantile(v, 0.51) == 6);
    std::vector<double> big;
    for (int i = 1; i <= 100; ++i) big.push_back(i);
    CHECK(nearest_rank_quantile(big, 0.95) == 95);
    CHECK_THROWS_AS(nearest_rank_quantile({}, 0.5), Error);
    CHECK_THROWS_AS(nearest_rank_quantile(v, 1.5), Error);
}

TEST_CASE("autoencoder scores") {
    TaskAutoencoder ae(1, 8, 2, 3);
    CHECK(ae.bottleneck() == 2);
    CHECK_THROWS_AS(TaskAutoencoder(1, 8, 8, 3), Error);
    // A feature inside the code subspace reconstructs exactly with identity maps.
    auto params = ae.parameters();
    for (auto& p : params)
        for (double& v : p.mutable_data()) v = 0.0;
    params[0].mutable_data()[0 * 2 + 0] = 1.0;
    params[0].mutable_data()[1 * 2 + 1] = 1.0;
    params[2].mutable_data()[0 * 8 + 0] = 1.0;
    params[2].mutable_data()[1 * 8 + 1] = 1.0;
    const std::vector<double> inside{0.7, 2.0, 0, 0, 0, 0, 0, 0};
    CHECK(ae.score(inside) == 0.0);
    const std::vector<double> outside{0, 0, 1, 0, 0, 0, 0, 0};
    CHECK(ae.score(outside) == doctest::Approx(1.0 / 8));
}

TEST_CASE("training lowers in-distribution scores and keeps banks independent") {
    Rng rng(4);
    DdasBank bank = make_bank({.batch = 16});
    const auto a = cluster(rng, 2.0, 200);
    const auto b = cluster(rng, -3.0, 200);

    TaskAutoencoder untrained(1, 16, 4, 11);
    double before = 0;
    for (const auto& f : a) before += untrained.score(f) / double(a.size());

    bank.train_autoencoder(1, a, 600, 11);
    CHECK(bank.mean_score(1, a) < before);
    const auto digest1 = bank.autoencoder(1).digest();
    bank.train_autoencoder(2, b, 600, 12);
    CHECK(bank.autoencoder(1).digest() == digest1);
    CHECK_THROWS_AS(bank.train_autoencoder(1, a, 1, 0), Error);
    CHECK_THROWS_AS(bank.train_autoencoder(3, std::vector<Feature>{}, 1, 0), Error);

    const auto held_a = cluster(rng, 2.0, 100);
    std::size_t own = 0;
    for (const auto& f : held_a) {
        const auto s = bank.score_all(f);
        REQUIRE(s.size() == 2);
        CHECK(s[0] >= 0.0);
        if (s[0] < s[1]) ++own;
    }
    CHECK(own >= 95);

    const auto& f = held_a.front();
    CHECK(bank.score_all(f) == bank.score_all(f));
}

TEST_CASE("threshold calibration and fixed override") {
    Rng rng(5);
    DdasBank bank = make_bank();
    CHECK_THROWS_AS(bank.threshold(), Error);
    const auto a = cluster(rng, 1.0, 50);
    bank.train_autoencoder(1, a, 0, 1);  // untrained autoencoder is still valid
    std::map<TaskId, std::vector<Feature>> held{{1, a}};
    std::vector<double> scores;
    for (const auto& f : a) scores.push_back(bank.autoencoder(1).score(f));
    CHECK(bank.calibrate_threshold(held, 1.0) == *std::max_element(scores.begin(), scores.end()));
    CHECK(bank.calibrate_threshold(held, 0.0) == *std::min_element(scores.begin(), scores.end()));
    CHECK(bank.calibrate_threshold(held, 0.95) == nearest_rank_quantile(scores, 0.95));
    CHECK_THROWS_AS(bank.calibrate_threshold({}, 0.95), Error);

    bank.set_threshold(0.0);
    for (const auto& f : a) CHECK(bank.select(bank.score_all(f)).zero_shot());

    DdasBank fixed = make_bank({.fixed_threshold = 0.065});
    fixed.train_autoencoder(1, a, 0, 1);
    CHECK(fixed.calibrate_threshold(held, 0.5) == 0.065);
}

TEST_CASE("reference autoencoder is kept apart from task routing") {
    Rng rng(6);
    DdasBank bank = make_bank();
    CHECK_FALSE(bank.reference_score(Feature(16, 0.0)).has_value());
    bank.train_autoencoder(0, cluster(rng, 0.5, 50), 10, 1);
    bank.train_autoencoder(1, cluster(rng, 2.0, 50), 10, 1);
    CHECK(bank.tasks() == std::vector<TaskId>{1});
    CHECK(bank.score_all(Feature(16, 0.0)).size() == 1);
    CHECK(bank.reference_score(Feature(16, 0.0)).has_value());
}

TEST_CASE("feature sources") {
    DdasBank bank = make_bank();
    const Tensor img = Tensor::full({4, 16}, 0.5);
    CHECK(bank.feature(img) == bank.feature(img));
    CHECK(bank.feature(img).size() == 16);

    DdasBank none({}, nullptr);
    CHECK_THROWS_AS(none.feature(img), Error);

    RandomProjectionFeatures rp(16, 8, 3);
    CHECK(rp.extract(img).size() == 8);
    CHECK(rp.extract(img) == RandomProjectionFeatures(16, 8, 3).extract(img));
    CHECK_THROWS_AS(rp.extract(Tensor::zeros({4, 5})), Error);

    Backbone bb({}, 1);
    BackboneFeatures bf(bb);
    CHECK(bf.extract(Tensor::full({16, 16}, 0.1)).size() == bb.geometry().width);
}

TEST_CASE("bank checkpoint round trip") {
    Rng rng(7);
    DdasBank bank = make_bank();
    bank.train_autoencoder(0, cluster(rng, 0.5, 30), 5, 1);
    bank.train_autoencoder(1, cluster(rng, 2.0, 30), 5, 2);
    bank.set_threshold(0.25);
    Container c;
    bank.save(c);
    DdasBank back = make_bank();
    back.load(c);
    CHECK(back.threshold() == 0.25);
    CHECK(back.autoencoder(1).digest() == bank.autoencoder(1).digest());
    CHECK(back.autoencoder(0).digest() == bank.autoencoder(0).digest());
}
