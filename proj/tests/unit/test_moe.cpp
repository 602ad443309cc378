#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "moecl/error.hpp"
#include "moecl/moe.hpp"
#include "moecl/optim.hpp"

using namespace moecl;

namespace {

MoeConfig small_config(std::size_t experts = 4, std::size_t k = 2) {
    MoeConfig c;
    c.experts = experts;
    c.top_k = k;
    c.rank = 2;
    return c;
}

void randomize_experts(MoeLayer& layer, Rng& rng, double std = 0.3) {
    for (std::size_t i = 0; i < layer.expert_count(); ++i) {
        for (double& v : layer.expert(i).down().mutable_data()) v = rng.normal(0, std);
        for (double& v : layer.expert(i).up().mutable_data()) v = rng.normal(0, std);
    }
}

// Dense oracle: every expert evaluated, weighted by the masked gate.
std::vector<double> dense_mix(const MoeLayer& layer, const std::vector<double>& w, const Tensor& x) {
    std::vector<double> out(x.numel(), 0.0);
    for (std::size_t i = 0; i < layer.expert_count(); ++i) {
        const Tensor e = layer.expert(i).forward(x);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w[i] * e.at(j);
    }
    return out;
}

}  // namespace

TEST_CASE("expert forward examples") {
    Rng rng(1);
    Expert e(2, 1, 0.02, rng);
    const Tensor x = Tensor::from({1, 2}, {3, 5});
    const Tensor zero = e.forward(x);
    for (double v : zero.data()) CHECK(v == 0.0);

    e.down().mutable_data()[0] = 1;
    e.down().mutable_data()[1] = 0;
    e.up().mutable_data()[0] = 2;
    e.up().mutable_data()[1] = 0;
    const Tensor y = e.forward(x);
    CHECK(y.at(0) == 6.0);
    CHECK(y.at(1) == 0.0);
    CHECK_THROWS_AS(e.forward(Tensor::zeros({1, 3})), Error);
}

TEST_CASE("gate examples") {
    const GateWeights g = gate_from_logits(Tensor::from({1, 4}, {3, 1, 2, 0}), 2);
    CHECK(g.selected == std::vector<std::size_t>{0, 2});
    const double e3 = std::exp(3.0), e2 = std::exp(2.0);
    CHECK(g.w[0] == doctest::Approx(e3 / (e3 + e2)).epsilon(1e-12));
    CHECK(g.w[2] == doctest::Approx(e2 / (e3 + e2)).epsilon(1e-12));
    CHECK(g.w[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(g.w[1] == 0.0);
    CHECK(g.w[3] == 0.0);

    const GateWeights tie = gate_from_logits(Tensor::from({1, 4}, {1, 1, 1, 1}), 2);
    CHECK(tie.selected == std::vector<std::size_t>{0, 1});
    CHECK(tie.w[0] == 0.5);
    CHECK(tie.w[1] == 0.5);

    const std::vector<double> logits{0.3, -1.2, 2.0};
    const GateWeights full = gate_from_logits(Tensor::from({1, 3}, logits), 3);
    double z = 0;
    for (double l : logits) z += std::exp(l);
    for (std::size_t i = 0; i < 3; ++i) CHECK(full.w[i] == doctest::Approx(std::exp(logits[i]) / z).epsilon(1e-12));

    CHECK(top_k_indices(std::vector<double>{5, 9, 9, 1}, 1) == std::vector<std::size_t>{1});
    CHECK(top_k_indices(std::vector<double>{5, 9}, 7) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("gate sparsity and shift invariance on random instances") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.index(24);
        const std::size_t k = 1 + rng.index(n + 2);
        std::vector<double> logits(n);
        for (double& l : logits) l = rng.normal(0, 3);
        const GateWeights g = gate_from_logits(Tensor::from({1, n}, logits), k);
        const std::size_t positives = std::count_if(g.w.begin(), g.w.end(), [](double w) { return w > 0; });
        CHECK(positives == std::min(k, n));
        CHECK(std::abs(std::accumulate(g.w.begin(), g.w.end(), 0.0) - 1.0) < 1e-12);

        const double shift = rng.normal(0, 50);
        std::vector<double> moved = logits;
        for (double& l : moved) l += shift;
        const GateWeights h = gate_from_logits(Tensor::from({1, n}, moved), k);
        CHECK(h.selected == g.selected);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(h.w[i] - g.w[i]) < 1e-12);
    }
}

TEST_CASE("sparse forward equals the dense masked sum") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.index(8);
        MoeLayer layer(6, small_config(n, 1 + rng.index(n)), rng.engine()());
        layer.add_task_router(1, trial);
        randomize_experts(layer, rng);
        const Tensor x = rng.normal_tensor({5, 6}, 1.0);
        const GateWeights g = layer.route(1, row(x, 0));
        const Tensor y = layer.forward(1, x, false);
        const auto dense = dense_mix(layer, g.w, x);
        for (std::size_t j = 0; j < dense.size(); ++j) CHECK(std::abs(y.at(j) - dense[j]) < 1e-10);
    }
}

TEST_CASE("one-hot gate and zero-initialised experts") {
    Rng rng(9);
    MoeLayer layer(4, small_config(3, 1), 1);
    layer.add_task_router(1, 2);
    const Tensor x = rng.normal_tensor({3, 4}, 1.0);
    const Tensor zero = layer.forward(1, x, false);
    for (double v : zero.data()) CHECK(v == 0.0);

    randomize_experts(layer, rng);
    const GateWeights g = layer.route(1, row(x, 0));
    REQUIRE(g.selected.size() == 1);
    const Tensor y = layer.forward(1, x, false);
    const Tensor e = layer.expert(g.selected[0]).forward(x);
    for (std::size_t j = 0; j < y.numel(); ++j) CHECK(y.at(j) == e.at(j));
}

TEST_CASE("task routers are isolated, deterministic and unique") {
    Rng rng(10);
    MoeLayer layer(4, small_config(), 1);
    layer.add_task_router(1, 5);
    randomize_experts(layer, rng);
    const Tensor x = rng.normal_tensor({3, 4}, 1.0);
    const Tensor before = layer.forward(1, x, false);
    const auto digest1 = layer.router(1).digest();
    layer.add_task_router(2, 6);
    const Tensor after = layer.forward(1, x, false);
    for (std::size_t j = 0; j < before.numel(); ++j) CHECK(before.at(j) == after.at(j));
    CHECK(layer.router(1).digest() == digest1);
    CHECK_FALSE(layer.router(1).parameters()[0].requires_grad());
    CHECK(layer.router(2).parameters()[0].requires_grad());

    MoeLayer a(4, small_config(), 3), b(4, small_config(), 3);
    CHECK(a.add_task_router(1, 42).digest() == b.add_task_router(1, 42).digest());
    CHECK_THROWS_AS(a.add_task_router(1, 42), Error);
    CHECK_THROWS_AS(a.route(9, Tensor::zeros({1, 4})), Error);
}

TEST_CASE("freeze_top_activated examples") {
    auto with_counts = [](MoeLayer& layer, TaskId t, std::vector<std::size_t> counts) {
        for (std::size_t i = 0; i < counts.size(); ++i)
            for (std::size_t n = 0; n < counts[i]; ++n) layer.tally(t, std::vector<std::size_t>{i});
    };
    MoeLayer layer(4, small_config(4, 2), 1);
    layer.add_task_router(1, 1);
    with_counts(layer, 1, {10, 0, 7, 3});
    CHECK(layer.freeze_top_activated(1) == std::vector<std::size_t>{0, 2});
    CHECK(layer.frozen_set() == std::set<std::size_t>{0, 2});

    MoeLayer pre(4, small_config(4, 2), 1);
    pre.add_task_router(1, 1);
    pre.expert(0).freeze();
    with_counts(pre, 1, {10, 0, 7, 3});
    CHECK(pre.freeze_top_activated(1) == std::vector<std::size_t>{2, 3});

    MoeLayer idle(4, small_config(4, 2), 1);
    idle.add_task_router(1, 1);
    CHECK(idle.freeze_top_activated(1).empty());

    MoeLayer full(2, small_config(2, 2), 1);
    full.add_task_router(1, 1);
    full.expert(0).freeze();
    full.expert(1).freeze();
    with_counts(full, 1, {4, 4});
    CHECK(full.freeze_top_activated(1).empty());
    full.add_task_router(2, 2);
    CHECK(full.trainable_parameters(2).size() == 2);  // router weight and bias only
}

TEST_CASE("trainable_parameters excludes frozen experts and other routers") {
    MoeLayer layer(4, small_config(4, 2), 1);
    layer.add_task_router(1, 1);
    CHECK(layer.trainable_parameters(1).size() == 2 + 2 * 4);
    layer.expert(0).freeze();
    layer.expert(2).freeze();
    layer.add_task_router(2, 2);
    const auto params = layer.trainable_parameters(2);
    CHECK(params.size() == 2 + 2 * 2);
    auto holds = [&](const Tensor& t) {
        return std::any_of(params.begin(), params.end(), [&](const Tensor& p) { return p.node() == t.node(); });
    };
    CHECK_FALSE(holds(layer.expert(0).down()));
    CHECK_FALSE(holds(layer.expert(2).up()));
    CHECK(holds(layer.expert(1).down()));
    CHECK(holds(layer.expert(3).up()));
    CHECK_FALSE(holds(layer.router(1).parameters()[0]));
    CHECK_THROWS_AS(layer.trainable_parameters(5), Error);
}

TEST_CASE("frozen experts are untouched by an optimizer step") {
    Rng rng(12);
    MoeLayer layer(4, small_config(4, 4), 1);
    layer.add_task_router(1, 1);
    randomize_experts(layer, rng);
    layer.expert(1).freeze();
    const auto frozen_digest = layer.expert(1).digest();
    const auto live_digest = layer.expert(0).digest();
    const Tensor x = rng.normal_tensor({3, 4}, 1.0);
    backward(sum(layer.forward(1, x, false)));
    std::vector<Tensor> all;
    for (std::size_t i = 0; i < 4; ++i) {
        all.push_back(layer.expert(i).down());
        all.push_back(layer.expert(i).up());
    }
    AdamW opt({.lr = 0.1, .weight_decay = 0.1});
    opt.step(all);
    CHECK(layer.expert(1).digest() == frozen_digest);
    CHECK(layer.expert(0).digest() != live_digest);
}

TEST_CASE("gradients of the composed MoE block") {
    Rng rng(13);
    MoeLayer layer(6, small_config(5, 2), 1);
    layer.add_task_router(1, 3);
    randomize_experts(layer, rng);
    for (double& v : layer.router(1).parameters()[0].mutable_data()) v = rng.normal(0, 1.0);
    const Tensor weights = rng.normal_tensor({4, 6}, 1.0);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = rng.normal_tensor({4, 6}, 1.0);
        worst = std::max(worst, grad_check([&](const Tensor& p) { return sum(mul(layer.forward(1, p, false), weights)); }, x));
        // through the router weight
        const Tensor w0 = layer.router(1).parameters()[0];
        const Tensor b0 = layer.router(1).parameters()[1];
        worst = std::max(worst, grad_check(
                                    [&](const Tensor& w) {
                                        const GateWeights g = gate_from_logits(add_bias(matmul(row(x, 0), w), b0), 2);
                                        Tensor y;
                                        for (std::size_t i : g.selected) {
                                            const Tensor t = scale_by(layer.expert(i).forward(x), g.probs, i);
                                            y = y.defined() ? add(y, t) : t;
                                        }
                                        return sum(mul(y, weights));
                                    },
                                    w0));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("activation heatmap conserves counts") {
    Rng rng(14);
    MoeConfig cfg = small_config(6, 2);
    MoeAdapter image("image", 2, 4, cfg, 1);
    MoeAdapter text("text", 2, 4, cfg, 2);
    image.add_task(1, 3);
    image.add_task(2, 4);
    text.add_task(1, 3);
    text.add_task(2, 4);
    for (int i = 0; i < 100; ++i) {
        const Tensor x = rng.normal_tensor({3, 4}, 1.0);
        for (std::size_t b = 0; b < 2; ++b) image.delta(b, x, {.task = 1, .tally = true});
    }
    const auto path = std::filesystem::temp_directory_path() / "moecl_heatmap.csv";
    const MoeAdapter* adapters[] = {&image, &text};
    export_activation_heatmap(adapters, path);

    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "tower,block,task,expert,count,frequency");
    std::map<std::string, std::pair<long, double>> totals;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string tower, block, task, expert, count, freq;
        std::getline(ss, tower, ',');
        std::getline(ss, block, ',');
        std::getline(ss, task, ',');
        std::getline(ss, expert, ',');
        std::getline(ss, count, ',');
        std::getline(ss, freq, ',');
        const double f = std::stod(freq);
        CHECK(f >= 0.0);
        CHECK(f <= 1.0);
        auto& t = totals[tower + block + "/" + task];
        t.first += std::stol(count);
        t.second += f;
        ++rows;
    }
    CHECK(rows == 2 * 2 * 2 * 6);
    CHECK(totals["image0/1"].first == 200);
    CHECK(totals["image1/1"].first == 200);
    CHECK(totals["image0/1"].second == doctest::Approx(2.0).epsilon(1e-5));
    CHECK(totals["image0/2"].first == 0);
    CHECK(totals["text1/1"].first == 0);
}

TEST_CASE("adapter checkpoint round trip") {
    Rng rng(15);
    MoeAdapter a("image", 2, 4, small_config(5, 2), 1);
    a.add_task(1, 2);
    a.add_task(2, 3);
    randomize_experts(a.layer(0), rng);
    for (int i = 0; i < 10; ++i) a.delta(0, rng.normal_tensor({3, 4}, 1.0), {.task = 2, .tally = true});
    a.freeze_top_activated(2);
    Container c;
    a.save(c);

    MoeAdapter b("image", 2, 4, small_config(5, 2), 99);
    b.load(c);
    for (std::size_t i = 0; i < 5; ++i) CHECK(b.layer(0).expert(i).digest() == a.layer(0).expert(i).digest());
    CHECK(b.layer(0).frozen_set() == a.layer(0).frozen_set());
    CHECK(b.layer(0).counts(2) == a.layer(0).counts(2));
    CHECK(b.layer(1).router(1).digest() == a.layer(1).router(1).digest());
    const Tensor x = rng.normal_tensor({3, 4}, 1.0);
    const Tensor ya = a.delta(0, x, {.task = 1});
    const Tensor yb = b.delta(0, x, {.task = 1});
    for (std::size_t j = 0; j < ya.numel(); ++j) CHECK(ya.at(j) == yb.at(j));
    CHECK_THROWS_AS(a.delta(0, x, {}), Error);
}

TEST_CASE("shared adapter starts transparent") {
    SharedAdapter s(2, 4, 3, 0.02, 1);
    CHECK(s.trainable_parameters().size() == 4);
    const Tensor zero = s.delta(1, Tensor::full({3, 4}, 1.0), {});
    for (double v : zero.data()) CHECK(v == 0.0);
}
