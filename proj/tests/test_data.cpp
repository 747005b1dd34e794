#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "dissim/data.hpp"
#include "dissim/nn.hpp"
#include "dissim/optim.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace dissim;
using dissim::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Writes `records` CIFAR-style records: `label_bytes` label bytes, then 3072
// pixel bytes whose values encode (record, offset).
void write_records(const fs::path& file, int records, int label_bytes, const std::vector<int>& labels,
                   size_t truncate_by = 0) {
    std::vector<uint8_t> buf;
    for (int r = 0; r < records; ++r) {
        for (int b = 0; b < label_bytes; ++b) buf.push_back(static_cast<uint8_t>(labels[(r + b) % labels.size()]));
        for (int k = 0; k < 3072; ++k) buf.push_back(static_cast<uint8_t>((r * 7 + k) % 256));
    }
    buf.resize(buf.size() - truncate_by);
    std::ofstream(file, std::ios::binary).write(reinterpret_cast<const char*>(buf.data()),
                                                static_cast<std::streamsize>(buf.size()));
}

void write_cifar10(const fs::path& dir, int max_label = 9) {
    std::vector<int> labels;
    for (int i = 0; i <= max_label; ++i) labels.push_back(i);
    for (int b = 1; b <= 5; ++b) write_records(dir / ("data_batch_" + std::to_string(b) + ".bin"), 10000, 1, labels);
    write_records(dir / "test_batch.bin", 10000, 1, labels);
}

std::set<int64_t> as_set(const std::vector<int64_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("cifar10 reader parses the binary layout") {
    TempDir tmp("c10");
    const fs::path sub = tmp.path / "cifar-10-batches-bin";
    fs::create_directories(sub);
    write_cifar10(sub);
    auto [train, test] = load_cifar10(tmp.path);
    CHECK(train.size() == 50000);
    CHECK(test.size() == 10000);
    CHECK(train.images.shape() == Shape{50000, 3, 32, 32});
    CHECK(train.labels[0] >= 0);
    CHECK(train.labels[0] <= 9);
    CHECK(train.labels[3] == 3);
    // Record 1 of the first file, green plane, row 2, column 5.
    const int64_t k = 1024 + 2 * 32 + 5;
    CHECK(train.images.at(1, 1, 2, 5) == doctest::Approx(((1 * 7 + k) % 256) / 255.0));
    CHECK(train.norm.mean.size() == 3);
    CHECK(test.norm.mean == train.norm.mean);
    const auto [lo, hi] = std::minmax_element(test.images.data().begin(), test.images.data().end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
}

TEST_CASE("cifar10 reader errors") {
    TempDir tmp("c10err");
    CHECK_THROWS_AS(load_cifar10(tmp.path), DataError);

    write_cifar10(tmp.path);
    write_records(tmp.path / "data_batch_3.bin", 10000, 1, {1}, 100);
    try {
        load_cifar10(tmp.path);
        FAIL("truncated file accepted");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("data_batch_3.bin") != std::string::npos);
    }

    write_records(tmp.path / "data_batch_3.bin", 10000, 1, {1, 10});
    CHECK_THROWS_AS(load_cifar10(tmp.path), DataError);

    write_records(tmp.path / "data_batch_3.bin", 9999, 1, {1});
    CHECK_THROWS_AS(load_cifar10(tmp.path), DataError);
}

TEST_CASE("cifar100 reader selects coarse or fine labels") {
    TempDir tmp("c100");
    // Label bytes per record r: coarse = labels[r % 5], fine = labels[(r+1) % 5].
    const std::vector<int> labels{3, 17, 42, 99, 5};
    write_records(tmp.path / "train.bin", 50000, 2, labels);
    write_records(tmp.path / "test.bin", 10000, 2, labels);
    auto fine = load_cifar100(tmp.path, Cifar100Labels::Fine);
    CHECK(fine.train.num_classes == 100);
    CHECK(fine.train.labels[0] == 17);
    CHECK(fine.test.labels[2] == 99);
    // Coarse labels outside [0, 20) are rejected.
    CHECK_THROWS_AS(load_cifar100(tmp.path, Cifar100Labels::Coarse), DataError);
}

TEST_CASE("synthetic dataset is balanced and deterministic") {
    auto a = synth_dataset(5, 100, 10, 16);
    auto b = synth_dataset(5, 100, 10, 16);
    auto c = synth_dataset(6, 100, 10, 16);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    CHECK_FALSE(a.images == c.images);
    std::vector<int> counts(10, 0);
    for (int y : a.labels) ++counts[static_cast<size_t>(y)];
    for (int n : counts) CHECK(n == 10);
    const auto [lo, hi] = std::minmax_element(a.images.data().begin(), a.images.data().end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
    CHECK_NOTHROW(a.validate());
    CHECK_THROWS_AS(synth_dataset(1, 5, 10, 16), DataError);
    CHECK_THROWS_AS(synth_dataset(1, 50, 1, 16), DataError);
    CHECK_THROWS_AS(synth_dataset(1, 50, 10, 4), DataError);
}

TEST_CASE("dataset validation") {
    auto ds = synth_dataset(1, 20, 4, 8);
    ds.labels[0] = 4;
    CHECK_THROWS_AS(ds.validate(), DataError);
    ds.labels[0] = 0;
    ds.norm.std[1] = 0;
    CHECK_THROWS_AS(ds.validate(), DataError);
}

TEST_CASE("training-split normalization standardizes the training set") {
    auto ds = synth_dataset(3, 300, 10, 16);
    auto it = BatchIterator::test(ds, ds.size());
    auto batch = *it.next();
    const int64_t N = batch.images.extent(0), HW = 16 * 16;
    for (int64_t c = 0; c < 3; ++c) {
        double s = 0, s2 = 0;
        for (int64_t i = 0; i < N; ++i)
            for (int64_t k = 0; k < HW; ++k) {
                const double v = batch.images.ptr()[(i * 3 + c) * HW + k];
                s += v;
                s2 += v * v;
            }
        const double m = s / static_cast<double>(N * HW);
        const double sd = std::sqrt(s2 / static_cast<double>(N * HW) - m * m);
        CHECK(std::abs(m) < 1e-3);
        CHECK(std::abs(sd - 1.0) < 1e-3);
    }
}

TEST_CASE("augmentation") {
    auto ds = synth_dataset(2, 20, 4, 32);
    Tensor<float> img(Shape{3, 32, 32}, std::vector<float>(ds.images.ptr(), ds.images.ptr() + 3 * 32 * 32));

    SUBCASE("disabled policy only normalizes") {
        std::mt19937_64 rng(1);
        AugmentPolicy off;
        off.enabled = false;
        auto out = augment(img, rng, off, ds.norm);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const double want = (img.at(c, y, x) - ds.norm.mean[c]) / ds.norm.std[c];
                    REQUIRE(out.at(c, y, x) == doctest::Approx(want).epsilon(1e-5));
                }
    }

    SUBCASE("cutout area bound and shape preservation") {
        Normalization identity{{0, 0, 0}, {1, 1, 1}};
        Tensor<float> ones(Shape{3, 32, 32}, 1.0f);
        AugmentPolicy cut{0, 16, false, true};
        for (uint64_t s = 0; s < 50; ++s) {
            std::mt19937_64 rng(s);
            auto out = augment(ones, rng, cut, identity);
            REQUIRE(out.shape() == ones.shape());
            for (int c = 0; c < 3; ++c) {
                int zeros = 0;
                for (int y = 0; y < 32; ++y)
                    for (int x = 0; x < 32; ++x) zeros += out.at(c, y, x) == 0.0f;
                CHECK(zeros <= 256);
                CHECK(zeros > 0);
            }
        }
    }

    SUBCASE("flip and crop move pixels but keep the shape") {
        Normalization identity{{0, 0, 0}, {1, 1, 1}};
        AugmentPolicy flip{0, 0, true, true};
        bool flipped = false;
        for (uint64_t s = 0; s < 8; ++s) {
            std::mt19937_64 rng(s);
            auto out = augment(img, rng, flip, identity);
            if (out.at(0, 3, 0) == img.at(0, 3, 31) && out.at(1, 7, 4) == img.at(1, 7, 27)) flipped = true;
        }
        CHECK(flipped);
        AugmentPolicy crop{4, 0, false, true};
        std::mt19937_64 rng(3);
        auto out = augment(img, rng, crop, identity);
        CHECK(out.shape() == img.shape());
    }

    SUBCASE("replaying the generator state reproduces the output") {
        std::mt19937_64 r1(77), r2(77);
        AugmentPolicy full;
        CHECK(augment(img, r1, full, ds.norm) == augment(img, r2, full, ds.norm));
    }

    SUBCASE("invalid policies") {
        CHECK_THROWS(AugmentPolicy{-1, 16, true, true}.validate(32));
        CHECK_THROWS(AugmentPolicy{4, 33, true, true}.validate(32));
    }
}

TEST_CASE("batch iteration") {
    auto ds = synth_dataset(4, 10, 2, 8);
    const AugmentPolicy none{0, 0, false, false};

    SUBCASE("short remainder is dropped") {
        auto it = BatchIterator::train(ds, 3, 1, none);
        std::vector<int64_t> sizes, seen;
        while (auto b = it.next()) {
            sizes.push_back(b->images.extent(0));
            seen.insert(seen.end(), b->indices.begin(), b->indices.end());
            CHECK(b->labels.size() == b->indices.size());
            for (size_t k = 0; k < b->indices.size(); ++k) {
                CHECK(b->labels[k] == ds.labels[static_cast<size_t>(b->indices[k])]);
            }
        }
        CHECK(sizes == std::vector<int64_t>{3, 3, 3});
        CHECK(it.num_batches() == 3);
        CHECK(seen.size() == 9);
        CHECK(as_set(seen).size() == 9);
        CHECK(as_set(seen) == as_set(it.order()));
    }

    SUBCASE("remainder of at least four is kept") {
        auto big = synth_dataset(4, 14, 2, 8);
        auto it = BatchIterator::train(big, 5, 1, none);
        std::vector<int64_t> sizes;
        while (auto b = it.next()) sizes.push_back(b->images.extent(0));
        CHECK(sizes == std::vector<int64_t>{5, 5, 4});
    }

    SUBCASE("order is a seed-determined permutation") {
        auto a = BatchIterator::train(ds, 5, 123, AugmentPolicy{2, 4, true, true});
        auto b = BatchIterator::train(ds, 5, 123, AugmentPolicy{2, 4, true, true});
        auto c = BatchIterator::train(ds, 5, 124, AugmentPolicy{2, 4, true, true});
        CHECK(a.order() == b.order());
        CHECK(as_set(a.order()).size() == 10);
        CHECK(a.order() != c.order());
        CHECK(a.next()->images == b.next()->images);
    }

    SUBCASE("test iteration is sequential and unaugmented") {
        auto it = BatchIterator::test(ds, 4);
        std::vector<int64_t> seen;
        while (auto b = it.next()) seen.insert(seen.end(), b->indices.begin(), b->indices.end());
        // The trailing pair falls below the minimum batch and is dropped.
        CHECK(seen == std::vector<int64_t>{0, 1, 2, 3, 4, 5, 6, 7});
    }

    SUBCASE("batch larger than the dataset") {
        CHECK_THROWS(BatchIterator::train(ds, 11, 0, none));
        CHECK_THROWS(BatchIterator::train(ds, 0, 0, none));
    }
}

TEST_CASE("small ResNet learns the synthetic task in five epochs") {
    SynthSpec spec;
    spec.seed = 2024;
    auto [train, test] = synth_split(spec);
    auto cfg = preset_config("resnet_s");
    cfg.input_shape = {3, spec.side, spec.side};
    auto model = build_model(cfg, 1);
    auto params = model.parameters();
    const int epochs = 5;
    const int64_t bs = 64;
    AugmentPolicy policy{2, 0, true, true};
    Sgd<float> opt({0.05, 0.9, true, 5e-4});
    auto probe = BatchIterator::train(train, bs, 0, policy);
    const int64_t total = epochs * probe.num_batches();
    int64_t step = 0;
    for (int e = 0; e < epochs; ++e) {
        auto it = BatchIterator::train(train, bs, derive_seed(7, static_cast<uint64_t>(e)), policy);
        while (auto b = it.next()) {
            Tape<float> tape;
            auto out = model.forward(tape, b->images, {}, Mode::Train);
            tape.backward(cross_entropy(out.logits, std::span<const int>(b->labels)));
            opt.step(params, cosine_lr(step++, total, 0.05));
        }
    }
    int64_t correct = 0;
    auto it = BatchIterator::test(test, 100);
    while (auto b = it.next()) {
        Tape<float> tape;
        auto logits = model.forward(tape, b->images, {}, Mode::Eval).logits.value();
        const int64_t K = logits.extent(1);
        for (int64_t i = 0; i < logits.extent(0); ++i) {
            const float* row = logits.ptr() + i * K;
            const auto pred = std::max_element(row, row + K) - row;
            correct += pred == b->labels[static_cast<size_t>(i)];
        }
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
    MESSAGE("synthetic test accuracy: " << acc);
    CHECK(acc > 0.80);
}
