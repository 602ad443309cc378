#include <cmath>

#include "doctest.h"
#include "moecl/backbone.hpp"
#include "moecl/error.hpp"

using namespace moecl;

namespace {

// Adds a fixed random delta; used to witness that sockets change the output.
class NoiseSocket : public AdapterSocket {
   public:
    NoiseSocket(std::size_t blocks, double scale) : blocks_(blocks), scale_(scale) {}
    std::size_t blocks() const override { return blocks_; }
    Tensor delta(std::size_t block, const Tensor& attended, const SocketCall& call) override {
        Rng rng(derive_seed(block, call.task.value_or(0)));
        return rng.normal_tensor(attended.shape(), scale_);
    }

   private:
    std::size_t blocks_;
    double scale_;
};

class ZeroSocket : public AdapterSocket {
   public:
    std::size_t blocks() const override { return 2; }
    Tensor delta(std::size_t, const Tensor& attended, const SocketCall&) override {
        return Tensor::zeros(attended.shape());
    }
};

Tensor random_image(Rng& rng, const BackboneGeometry& g) { return rng.normal_tensor({g.patches, g.patch_dim}, 1.0); }

double norm(const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("image encoding is unit norm and zero deltas are transparent") {
    Backbone bb({}, 1);
    Rng rng(2);
    ZeroSocket zero;
    for (int i = 0; i < 20; ++i) {
        const Tensor img = random_image(rng, bb.geometry());
        const Tensor plain = bb.image().encode(img);
        CHECK(norm(plain) == doctest::Approx(1.0).epsilon(1e-12));
        const Tensor with = bb.image().encode(img, &zero, {.task = 1});
        for (std::size_t j = 0; j < plain.numel(); ++j) CHECK(std::abs(plain.at(j) - with.at(j)) < 1e-12);
    }
}

TEST_CASE("different socket calls give different embeddings") {
    Backbone bb({}, 1);
    Rng rng(3);
    NoiseSocket noisy(2, 0.5);
    const Tensor img = random_image(rng, bb.geometry());
    const Tensor a = bb.image().encode(img, &noisy, {.task = 1});
    const Tensor b = bb.image().encode(img, &noisy, {.task = 2});
    double diff = 0;
    for (std::size_t j = 0; j < a.numel(); ++j) diff += std::abs(a.at(j) - b.at(j));
    CHECK(diff > 1e-3);

    NoiseSocket wrong(3, 0.5);
    CHECK_THROWS_AS(bb.image().encode(img, &wrong), Error);
    CHECK_THROWS_AS(bb.image().encode(Tensor::zeros({3, 16})), Error);
}

TEST_CASE("text tower registry and encoding") {
    Backbone bb({}, 1);
    const std::vector<double> name(16, 0.25);
    bb.text().register_class(7, name);
    bb.text().register_class(7, name);
    std::vector<double> other = name;
    other[0] = 1.0;
    CHECK_THROWS_AS(bb.text().register_class(7, other), Error);
    CHECK_THROWS_AS(bb.text().register_class(8, std::vector<double>(3, 0.0)), Error);
    CHECK_THROWS_AS(bb.text().encode(99), Error);

    bb.text().register_class(8, other);
    const Tensor e7 = bb.text().encode(7);
    CHECK(norm(e7) == doctest::Approx(1.0).epsilon(1e-12));
    const std::vector<ClassId> ids{7, 8};
    const Tensor both = bb.text().encode_classes(ids);
    CHECK(both.shape() == Shape{2, 32});
    for (std::size_t j = 0; j < 32; ++j) CHECK(both.at(0, j) == e7.at(j));

    ZeroSocket zero;
    const Tensor z = bb.text().encode(7, &zero, {.task = 1});
    for (std::size_t j = 0; j < 32; ++j) CHECK(std::abs(z.at(j) - e7.at(j)) < 1e-12);
}

TEST_CASE("classify_cosine") {
    const std::vector<ClassId> ids{4, 2, 9};
    const Tensor protos = Tensor::from({3, 2}, {1, 0, 0, 1, std::sqrt(0.5), std::sqrt(0.5)});

    const std::vector<double> e{0, 1};
    const CosineResult r = classify_cosine(e, ids, protos);
    CHECK(r.predicted == 2);
    CHECK(r.similarities[1] == doctest::Approx(1.0));
    CHECK(r.similarities[0] == 0.0);

    // exact tie between ids 4 and 2 resolves to 2
    const Tensor tied = Tensor::from({2, 2}, {1, 0, 1, 0});
    const std::vector<ClassId> tie_ids{4, 2};
    CHECK(classify_cosine(std::vector<double>{1, 0}, tie_ids, tied).predicted == 2);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor p = rng.normal_tensor({3, 4}, 1.0);
        const Tensor x = rng.normal_tensor({1, 4}, 1.0);
        const CosineResult got = classify_cosine(x.data(), ids, p);
        std::size_t best = 0;
        double best_s = -1e300;
        for (std::size_t c = 0; c < 3; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < 4; ++j) s += x.at(j) * p.at(c, j);
            CHECK(got.similarities[c] == doctest::Approx(s).epsilon(1e-12));
            if (s > best_s) best_s = s, best = c;
        }
        CHECK(got.predicted == ids[best]);
    }
    CHECK_THROWS_AS(classify_cosine(e, std::vector<ClassId>{}, Tensor::zeros({0, 2})), Error);
}

TEST_CASE("argmax is invariant to scaling the unnormalised embedding") {
    Backbone bb({}, 4);
    Rng rng(6);
    const Tensor protos = rng.normal_tensor({5, 32}, 1.0);
    const std::vector<ClassId> ids{0, 1, 2, 3, 4};
    for (int i = 0; i < 10; ++i) {
        const Tensor raw = bb.image().encode_unnormalized(random_image(rng, bb.geometry()));
        const ClassId a = classify_cosine(raw.data(), ids, protos).predicted;
        const ClassId b = classify_cosine(scale(raw, 3.7).data(), ids, protos).predicted;
        CHECK(a == b);
    }
}

TEST_CASE("pretraining freezes, is deterministic and transfers to held-out classes") {
    SyntheticWorld world({}, 7);
    const ReferenceSet ref = world.generate_reference(11, {});

    Backbone zero_steps({}, 3);
    const auto before = zero_steps.digest();
    pretrain_backbone(zero_steps, ref, {.steps = 0});
    CHECK(zero_steps.frozen());
    CHECK(zero_steps.digest() == before);

    PretrainConfig cfg{.steps = 150, .batch = 16, .lr = 3e-3, .seed = 5};
    Backbone a({}, 3), b({}, 3);
    const PretrainReport ra = pretrain_backbone(a, ref, cfg);
    pretrain_backbone(b, ref, cfg);
    CHECK(a.frozen());
    CHECK(a.digest() == b.digest());
    CHECK(a.digest() != before);
    CHECK(ra.loss_decreased);
    CHECK(ra.heldout_zero_shot > 60.0);

    const std::vector<ClassId> pair{ref.pretext_classes[0], ref.pretext_classes[1]};
    const Tensor t = a.text().encode_classes(pair);
    double cos = 0;
    for (std::size_t j = 0; j < 32; ++j) cos += t.at(0, j) * t.at(1, j);
    CHECK(cos < 0.999);
}

TEST_CASE("backbone checkpoint round trip") {
    SyntheticWorld world({}, 7);
    const ReferenceSet ref = world.generate_reference(11, {});
    Backbone bb({}, 3, 12.5);
    pretrain_backbone(bb, ref, {.steps = 5, .batch = 4});
    Container c;
    bb.save(c);
    const Backbone back = Backbone::load(c);
    CHECK(back.digest() == bb.digest());
    CHECK(back.frozen());
    CHECK(back.logit_scale() == 12.5);
    CHECK(back.text().prototypes().size() == bb.text().prototypes().size());
    CHECK(back.geometry() == bb.geometry());
}
