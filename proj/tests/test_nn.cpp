#include <cmath>

#include "dissim/data.hpp"
#include "dissim/nn.hpp"
#include "dissim/optim.hpp"
#include "doctest.h"

using namespace dissim;

namespace {

Tensor<float> random_batch(const Shape& shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

ModelConfig small_config(int side = 16) {
    auto cfg = preset_config("resnet_s");
    cfg.input_shape = {3, side, side};
    return cfg;
}

}  // namespace

TEST_CASE("presets match the published architectures") {
    auto r18 = preset_config("resnet18");
    CHECK(r18.block_depths == std::array<int, 4>{2, 2, 2, 2});
    CHECK(r18.block_channels == std::array<int, 4>{64, 128, 256, 512});
    CHECK_FALSE(r18.bottleneck);
    auto r34 = preset_config("resnet34");
    CHECK(r34.block_depths == std::array<int, 4>{3, 4, 6, 3});
    CHECK(r34.block_channels == std::array<int, 4>{64, 128, 256, 512});
    auto r101 = preset_config("resnet101");
    CHECK(r101.block_depths == std::array<int, 4>{3, 4, 23, 3});
    CHECK(r101.block_channels == std::array<int, 4>{256, 512, 1024, 2048});
    CHECK(r101.bottleneck);
    auto rs = preset_config("resnet_s");
    CHECK(rs.block_channels == std::array<int, 4>{16, 32, 64, 128});
    CHECK_THROWS_AS(preset_config("resnet50"), ModelError);
}

TEST_CASE("build_model rejects invalid block specs") {
    auto cfg = preset_config("resnet_s");
    cfg.block_depths[2] = 0;
    CHECK_THROWS_AS(build_model(cfg, 0), ModelError);
    cfg = preset_config("resnet_s");
    cfg.num_classes = 1;
    CHECK_THROWS_AS(build_model(cfg, 0), ModelError);
    cfg = preset_config("resnet_s");
    cfg.input_shape = {3, 12, 12};
    CHECK_THROWS_AS(build_model(cfg, 0), ModelError);
    cfg = preset_config("resnet101");
    cfg.block_channels[0] = 30;
    CHECK_THROWS_AS(build_model(cfg, 0), ModelError);
}

TEST_CASE("tap enumeration follows the block layout for every preset") {
    for (const auto& name : preset_names()) {
        CAPTURE(name);
        auto cfg = preset_config(name);
        auto m = build_model(cfg, 1);
        int expected = 0;
        for (int d : cfg.block_depths) expected += d;
        REQUIRE(m.num_taps() == expected);
        int id = 0;
        for (int s = 0; s < 4; ++s) {
            const int side = 32 >> s;
            for (int u = 0; u < cfg.block_depths[s]; ++u) {
                const auto& t = m.tap(++id);
                CHECK(t.id == id);
                CHECK(t.block_index == s + 1);
                CHECK(t.unit_index == u);
                CHECK(t.channels == cfg.block_channels[s]);
                CHECK(t.height == side);
                CHECK(t.width == side);
            }
        }
    }
    auto r18 = build_model(preset_config("resnet18"), 0);
    int per_block[4] = {0, 0, 0, 0};
    for (const auto& t : r18.taps()) ++per_block[t.block_index - 1];
    CHECK(per_block[0] == 2);
    CHECK(per_block[3] == 2);
    CHECK(r18.tap(1).channels == 64);
    auto r34 = build_model(preset_config("resnet34"), 0);
    int per34[4] = {0, 0, 0, 0};
    for (const auto& t : r34.taps()) ++per34[t.block_index - 1];
    CHECK(per34[0] == 3);
    CHECK(per34[1] == 4);
    CHECK(per34[2] == 6);
    CHECK(per34[3] == 3);
    CHECK(r34.num_taps() == 16);
}

TEST_CASE("same config and seed give bit-identical parameters") {
    auto cfg = small_config();
    auto a = build_model(cfg, 42);
    auto b = build_model(cfg, 42);
    auto c = build_model(cfg, 43);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->value == pb[i]->value);
        if (!(pa[i]->value == pc[i]->value)) any_diff = true;
    }
    CHECK(any_diff);
    auto sa = a.state();
    CHECK(sa.size() > pa.size());
    CHECK(sa.back().name.ends_with(".running_var"));
}

TEST_CASE("forward shapes with and without taps") {
    auto m = build_model(preset_config("resnet18"), 3);
    auto x = random_batch({4, 3, 32, 32}, 5);
    Tape<float> tape;
    const int ids[] = {1, 4};
    auto out = m.forward(tape, x, ids, Mode::Eval, false);
    CHECK(out.logits.shape() == Shape{4, 10});
    REQUIRE(out.taps.size() == 2);
    CHECK(out.taps.at(1).shape() == Shape{4, 64, 32, 32});
    CHECK(out.taps.at(4).shape() == Shape{4, 128, 16, 16});

    Tape<float> plain;
    auto none = m.forward(plain, x, {}, Mode::Eval, false);
    CHECK(none.taps.empty());
    CHECK(none.logits.value() == out.logits.value());

    Tape<float> bad;
    const int unknown[] = {9};
    CHECK_THROWS_AS(m.forward(bad, x, unknown, Mode::Eval), ModelError);
    Tape<float> bad2;
    CHECK_THROWS_AS(m.forward(bad2, random_batch({2, 3, 16, 16}, 1), {}, Mode::Eval), ModelError);
}

TEST_CASE("captured representations are pre-activation") {
    auto m = build_model(small_config(), 7);
    auto x = random_batch({8, 3, 16, 16}, 11);
    Tape<float> tape;
    std::vector<int> ids;
    for (const auto& t : m.taps()) ids.push_back(t.id);
    auto out = m.forward(tape, x, ids, Mode::Train);
    for (int id : ids) {
        CAPTURE(id);
        const auto& z = out.taps.at(id).value();
        float lo = 0;
        for (float v : z.data()) lo = std::min(lo, v);
        CHECK(lo < 0.0f);
        CHECK(z.shape() == Shape{8, m.tap(id).channels, m.tap(id).height, m.tap(id).width});
    }
}

TEST_CASE("taps are observers in training mode") {
    auto cfg = small_config();
    auto a = build_model(cfg, 9);
    auto b = build_model(cfg, 9);
    auto x = random_batch({6, 3, 16, 16}, 2);
    Tape<float> ta, tb;
    const int all[] = {1, 2, 3, 4, 5, 6, 7, 8};
    auto la = a.forward(ta, x, all, Mode::Train).logits.value();
    auto lb = b.forward(tb, x, {}, Mode::Train).logits.value();
    CHECK(la == lb);
    auto sa = a.state(), sb = b.state();
    for (size_t i = 0; i < sa.size(); ++i) CHECK(*sa[i].tensor == *sb[i].tensor);
}

TEST_CASE("frozen forward contributes no parameter gradients") {
    auto m = build_model(small_config(), 1);
    auto x = random_batch({4, 3, 16, 16}, 3);
    Tape<float> tape;
    auto out = m.forward(tape, x, {}, Mode::Eval, false);
    CHECK_FALSE(out.logits.requires_grad());
}

TEST_CASE("sgd examples") {
    Parameter<float> p("p", Tensor<float>(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f}));
    p.grad = Tensor<float>(Shape{3}, std::vector<float>{0.5f, 1.0f, -4.0f});
    Parameter<float>* ps[] = {&p};

    Sgd<float> plain({0.1, 0.0, false, 0.0});
    plain.step(ps);
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.05));
    CHECK(p.value[1] == doctest::Approx(-2.0 - 0.1));
    CHECK(p.value[2] == doctest::Approx(0.5 + 0.4));

    auto before = p.value;
    Sgd<float> frozen({0.0, 0.9, true, 5e-4});
    frozen.step(ps);
    CHECK(p.value == before);

    Parameter<float> bad("bad", Tensor<float>(Shape{2}, 1.0f));
    bad.grad = Tensor<float>(Shape{3}, 1.0f);
    Parameter<float>* bs[] = {&bad};
    CHECK_THROWS_AS(plain.step(bs), ShapeError);
}

TEST_CASE("sgd momentum matches the hand-unrolled recurrence") {
    const double lr = 0.1, mu = 0.9, wd = 0.01;
    const double g1 = 0.3, g2 = -0.7;
    for (bool nesterov : {false, true}) {
        CAPTURE(nesterov);
        Parameter<double> p("p", Tensor<double>::scalar(2.0));
        Parameter<double>* ps[] = {&p};
        Sgd<double> opt({lr, mu, nesterov, wd});
        double w = 2.0, v = 0.0;
        for (double g : {g1, g2}) {
            p.grad = Tensor<double>::scalar(g);
            opt.step(ps);
            const double d = g + wd * w;
            v = mu * v + d;
            w -= lr * (nesterov ? d + mu * v : v);
            CHECK(p.value.item() == doctest::Approx(w).epsilon(1e-14));
        }
    }
    // Two steps written out by hand, no momentum buffer code shared.
    Parameter<double> p("p", Tensor<double>::scalar(1.0));
    Parameter<double>* ps[] = {&p};
    Sgd<double> opt({0.1, 0.9, true, 0.0});
    p.grad = Tensor<double>::scalar(1.0);
    opt.step(ps);
    // v1 = 1, d = 1 + 0.9 = 1.9, w = 1 - 0.19
    CHECK(p.value.item() == doctest::Approx(0.81));
    p.grad = Tensor<double>::scalar(1.0);
    opt.step(ps);
    // v2 = 0.9 + 1 = 1.9, d = 1 + 1.71 = 2.71, w = 0.81 - 0.271
    CHECK(p.value.item() == doctest::Approx(0.539));
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 0.1) == doctest::Approx(0.1));
    CHECK(cosine_lr(100, 100, 0.1) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 0.1) == doctest::Approx(0.05));
    CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx((1 + std::sqrt(0.5)) / 2));
    CHECK_THROWS(cosine_lr(0, 0, 0.1));
    CHECK_THROWS(cosine_lr(101, 100, 0.1));
}

TEST_CASE("training loss decreases on a fixed subset") {
    auto ds = synth_dataset(17, 512, 10, 16);
    auto model = build_model(small_config(), 5);
    auto params = model.parameters();
    const int epochs = 5;
    const int64_t bs = 64;
    Sgd<float> opt({0.05, 0.9, true, 5e-4});
    const AugmentPolicy none{0, 0, false, false};
    std::vector<double> epoch_loss;
    int64_t step = 0;
    const int64_t total = epochs * (512 / bs);
    for (int e = 0; e < epochs; ++e) {
        auto it = BatchIterator::train(ds, bs, derive_seed(99, static_cast<uint64_t>(e)), none);
        double sum_loss = 0;
        int n = 0;
        while (auto b = it.next()) {
            Tape<float> tape;
            auto out = model.forward(tape, b->images, {}, Mode::Train);
            auto loss = cross_entropy(out.logits, std::span<const int>(b->labels));
            sum_loss += loss.value().item();
            ++n;
            tape.backward(loss);
            opt.step(params, cosine_lr(step++, total, 0.05));
        }
        epoch_loss.push_back(sum_loss / n);
    }
    for (size_t e = 1; e < epoch_loss.size(); ++e) {
        CAPTURE(e);
        CHECK(epoch_loss[e] < epoch_loss[e - 1]);
    }
}
