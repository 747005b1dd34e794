#include <numeric>

#include "dissim/train.hpp"
#include "doctest.h"

using namespace dissim;

namespace {

Tensor<float> randn_f(const Shape& shape, uint64_t seed, float stddev = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, stddev);
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

ModelConfig small_model(int side = 16) {
    auto cfg = preset_config("resnet_s");
    cfg.input_shape = {3, side, side};
    return cfg;
}

DissimConfig quick_config() {
    DissimConfig cfg;
    cfg.metric = Metric::ExpVar;
    cfg.lambda = 1.0;
    cfg.tap_ids = {4};
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.base_lr = 0.05;
    cfg.augment = AugmentPolicy{2, 0, true, true};
    cfg.seed = 11;
    return cfg;
}

std::vector<Tensor<float>> snapshot(Model& m) {
    std::vector<Tensor<float>> out;
    for (const auto& nt : m.state()) out.push_back(*nt.tensor);
    return out;
}

bool same_state(Model& m, const std::vector<Tensor<float>>& snap) {
    auto st = m.state();
    if (st.size() != snap.size()) return false;
    for (size_t i = 0; i < st.size(); ++i) {
        if (!(*st[i].tensor == snap[i])) return false;
    }
    return true;
}

Batch make_batch(const Dataset& ds, int64_t n, uint64_t seed) {
    auto it = BatchIterator::train(ds, n, seed, AugmentPolicy{2, 4, true, true});
    return *it.next();
}

}  // namespace

TEST_CASE("projection shapes follow the concatenated channels") {
    const int one[] = {64};
    const int two[] = {64, 64};
    const int three[] = {64, 64, 64};
    CHECK(make_projection(one, 64, 0).weight.value.shape() == Shape{64, 64, 1, 1});
    CHECK(make_projection(two, 64, 0).weight.value.shape() == Shape{64, 128, 1, 1});
    auto p3 = make_projection(three, 64, 0);
    CHECK(p3.in_total() == 192);
    CHECK(p3.bias.value.shape() == Shape{64});
    CHECK(make_projection(two, 64, 5).weight.value == make_projection(two, 64, 5).weight.value);
    CHECK_THROWS(make_projection(std::span<const int>{}, 64, 0));
    const int bad[] = {64, 0};
    CHECK_THROWS(make_projection(bad, 64, 0));

    Tape<float> tape;
    auto p = make_projection(two, 8, 1);
    auto z = tape.constant(randn_f({2, 128, 5, 3}, 1));
    CHECK(p.apply(tape, z, false).shape() == Shape{2, 8, 5, 3});
}

TEST_CASE("dissim_loss examples") {
    const int chans[] = {6};
    auto zu = randn_f({4, 6, 4, 4}, 3);

    SUBCASE("identity projection gives maximal similarity") {
        auto proj = make_projection(chans, 6, 0);
        proj.weight.value.fill(0.0f);
        for (int64_t c = 0; c < 6; ++c) proj.weight.value.at(c, c, 0, 0) = 1.0f;
        const std::vector<Tensor<float>> zt{zu};
        Tape<float> tape;
        auto dl = dissim_loss(tape.input(zu), zt, proj, Metric::ExpVar, 0.7);
        CHECK(dl.sim == 1.0);
        CHECK(dl.loss.value().item() == doctest::Approx(0.7));
        Tape<float> t0;
        auto zero = dissim_loss(t0.input(zu), zt, proj, Metric::ExpVar, 0.0);
        CHECK(zero.loss.value().item() == 0.0f);
        CHECK(zero.sim == 1.0);
    }

    SUBCASE("independent targets and a fresh projection score near zero") {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            CAPTURE(seed);
            const int c16[] = {16};
            auto proj = make_projection(c16, 16, seed);
            auto z = randn_f({8, 16, 8, 8}, 100 + seed);
            const std::vector<Tensor<float>> zt{randn_f({8, 16, 8, 8}, 200 + seed)};
            Tape<float> tape;
            CHECK(std::abs(dissim_loss(tape.input(z), zt, proj, Metric::ExpVar, 1.0).sim) < 0.1);
        }
    }

    SUBCASE("gradient reaches z_U but not the projection or z_T") {
        for (Metric m : {Metric::L2Corr, Metric::ExpVar, Metric::LinCKA}) {
            CAPTURE(metric_name(m));
            const int c2[] = {6, 6};
            auto proj = make_projection(c2, 6, 4);
            const std::vector<Tensor<float>> zt{randn_f({4, 6, 4, 4}, 5), randn_f({4, 6, 4, 4}, 6)};
            Tape<float> tape;
            auto v = tape.input(zu);
            auto dl = dissim_loss(v, zt, proj, m, 1.0);
            auto grads = tape.backward(dl.loss);
            double gz = 0, gp = 0;
            for (float g : grads[v].data()) gz = std::max(gz, std::abs(double{g}));
            for (float g : proj.weight.grad.data()) gp = std::max(gp, std::abs(double{g}));
            for (float g : proj.bias.grad.data()) gp = std::max(gp, std::abs(double{g}));
            CHECK(gz > 0);
            CHECK(gp == 0.0);
        }
    }

    SUBCASE("shape mismatches") {
        auto proj = make_projection(chans, 6, 0);
        Tape<float> tape;
        const std::vector<Tensor<float>> wrong_hw{randn_f({4, 6, 2, 2}, 1)};
        CHECK_THROWS_AS(dissim_loss(tape.input(zu), wrong_hw, proj, Metric::ExpVar, 1.0), ShapeError);
        const std::vector<Tensor<float>> wrong_c{randn_f({4, 5, 4, 4}, 1)};
        CHECK_THROWS_AS(dissim_loss(tape.input(zu), wrong_c, proj, Metric::ExpVar, 1.0), ShapeError);
    }
}

TEST_CASE("projection updates improve similarity on the same batch") {
    for (Metric m : {Metric::ExpVar, Metric::L2Corr}) {
        CAPTURE(metric_name(m));
        int violations = 0;
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const int c[] = {8};
            auto proj = make_projection(c, 8, seed);
            auto zt = randn_f({8, 8, 4, 4}, 300 + seed);
            // z_U depends linearly on z_T, so a better projection exists.
            auto mix = randn_f({8, 8, 1, 1}, 400 + seed, 0.5f);
            auto zu = conv2d_values(zt, mix, 1, 0);
            auto noise = randn_f(zu.shape(), 500 + seed, 0.3f);
            for (size_t i = 0; i < zu.size(); ++i) zu[i] += noise[i];
            const std::vector<Tensor<float>> targets{zt};
            const double before = projection_update(proj, zu, targets, m, 0.01);
            const double after = projection_objective(proj, zu, targets, m);
            if (!(after <= before)) ++violations;
        }
        CHECK(violations <= 1);
    }
}

TEST_CASE("zero lambda reproduces plain training bit for bit") {
    auto ds = synth_dataset(5, 256, 10, 16);
    auto mcfg = small_model();
    auto frozen = build_model(mcfg, 99);
    auto plain = build_model(mcfg, 1);
    auto reg = build_model(mcfg, 1);
    DissimConfig cfg = quick_config();
    cfg.lambda = 0.0;
    cfg.tap_ids = {2, 5};
    DissimTrainer tp(plain, {}, cfg, 1);
    DissimTrainer tr(reg, {&frozen}, cfg, 1);
    CHECK_FALSE(tp.regularized());
    CHECK(tr.regularized());
    for (int s = 0; s < 50; ++s) {
        auto batch = make_batch(ds, 16, static_cast<uint64_t>(s));
        tp.step(batch, 0.05);
        auto st = tr.step(batch, 0.05);
        CHECK(st.taps.size() == 2);
    }
    CHECK(same_state(reg, snapshot(plain)));
}

TEST_CASE("regularized step records one entry per tap and a zero projection gradient") {
    auto ds = synth_dataset(6, 128, 10, 16);
    auto mcfg = small_model();
    auto f1 = build_model(mcfg, 20);
    auto f2 = build_model(mcfg, 21);
    auto u = build_model(mcfg, 22);
    for (Metric m : {Metric::ExpVar, Metric::L2Corr, Metric::LinCKA}) {
        CAPTURE(metric_name(m));
        DissimConfig cfg = quick_config();
        cfg.metric = m;
        cfg.tap_ids = {1, 4, 7};
        DissimTrainer trainer(u, {&f1, &f2}, cfg, 3);
        REQUIRE(trainer.projections().size() == 3);
        CHECK(trainer.projections()[1].weight.value.shape() == Shape{32, 64, 1, 1});
        auto snap1 = snapshot(f1);
        for (int s = 0; s < 3; ++s) {
            auto st = trainer.step(make_batch(ds, 32, static_cast<uint64_t>(s)), 0.05);
            REQUIRE(st.taps.size() == 3);
            for (size_t k = 0; k < 3; ++k) {
                CHECK(st.taps[k].tap_id == cfg.tap_ids[k]);
                CHECK(std::isfinite(st.taps[k].sim));
                CHECK(std::isfinite(st.taps[k].proj_objective));
                CHECK(st.taps[k].act_var_mean > 0);
            }
            CHECK(st.proj_grad_absmax == 0.0);
            CHECK(std::isfinite(st.total_loss));
        }
        CHECK(same_state(f1, snap1));
    }
}

TEST_CASE("trainer rejects incompatible setups") {
    auto mcfg = small_model();
    auto u = build_model(mcfg, 1);
    auto f = build_model(mcfg, 2);
    auto other = small_model(32);
    auto g = build_model(other, 3);
    DissimConfig cfg = quick_config();
    CHECK_THROWS_AS(DissimTrainer(u, {&g}, cfg, 0), ModelError);
    cfg.tap_ids = {42};
    CHECK_THROWS_AS(DissimTrainer(u, {&f}, cfg, 0), ModelError);
    cfg.tap_ids = {};
    CHECK_THROWS(DissimTrainer(u, {&f}, cfg, 0));
    cfg = quick_config();
    cfg.lambda = -1;
    CHECK_THROWS(cfg.validate());
    cfg = quick_config();
    cfg.batch_size = 3;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("divergence is reported") {
    auto ds = synth_dataset(6, 64, 10, 16);
    auto u = build_model(small_model(), 1);
    DissimConfig cfg = quick_config();
    DissimTrainer trainer(u, {}, cfg, 0);
    CHECK_THROWS_AS(
        {
            for (int s = 0; s < 20; ++s) trainer.step(make_batch(ds, 32, static_cast<uint64_t>(s)), 1e30);
        },
        DivergenceError);
}

TEST_CASE("sequences size projections by concatenation and keep frozen models intact") {
    SynthSpec spec;
    spec.seed = 8;
    spec.n_train = 1024;
    spec.n_test = 256;
    auto data = synth_split(spec);
    auto mcfg = small_model();
    DissimConfig cfg = quick_config();

    auto single = train_sequence(mcfg, cfg, 1, data);
    REQUIRE(single.size() == 1);
    CHECK(single[0].projections.empty());

    std::vector<std::vector<EpochStats>> epochs(3);
    auto seq = train_sequence(mcfg, cfg, 3, data, [&](int i) {
        TrainHooks h;
        h.on_epoch = [&epochs, i](const EpochStats& e) { epochs[static_cast<size_t>(i)].push_back(e); };
        return h;
    });
    REQUIRE(seq.size() == 3);
    const int C = mcfg.block_channels[1];
    CHECK(seq[0].projections.empty());
    REQUIRE(seq[1].projections.size() == 1);
    REQUIRE(seq[2].projections.size() == 1);
    CHECK(seq[1].projections[0].weight.value.shape() == Shape{C, C, 1, 1});
    CHECK(seq[2].projections[0].weight.value.shape() == Shape{C, 2 * C, 1, 1});
    for (int i = 0; i < 3; ++i) {
        CHECK(seq[static_cast<size_t>(i)].seed == cfg.seed + static_cast<uint64_t>(i));
        REQUIRE(epochs[static_cast<size_t>(i)].size() == static_cast<size_t>(cfg.epochs));
        const double acc = epochs[static_cast<size_t>(i)].back().train_acc;
        MESSAGE("model " << i << " final train accuracy " << acc);
        CHECK(acc > 3.0 / data.train.num_classes);
    }
    // Model 0 is the unregularized model of the single run, and later
    // members never modify it.
    CHECK(same_state(seq[0].model, snapshot(single[0].model)));
}

TEST_CASE("two independently trained models have similar representations") {
    SynthSpec spec;
    spec.seed = 9;
    spec.n_train = 1024;
    spec.n_test = 256;
    auto data = synth_split(spec);
    auto mcfg = small_model();
    DissimConfig cfg = quick_config();
    cfg.lambda = 0;
    cfg.tap_ids = {};
    auto pair = train_sequence(mcfg, cfg, 2, data);
    std::vector<int> taps(8);
    std::iota(taps.begin(), taps.end(), 1);
    auto H = cka_heatmap(pair[0].model, pair[1].model, data.test, 128, taps, taps);
    double diag = 0;
    for (int64_t i = 0; i < 8; ++i) diag += H.at(i, i);
    diag /= 8;
    MESSAGE("mean diagonal CKA " << diag);
    CHECK(diag > 0.4);
}
