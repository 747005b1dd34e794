#include "dissim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace dissim {

namespace fs = std::filesystem;

uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void Dataset::validate() const {
    if (images.rank() != 4) throw DataError("dataset images must be [N,C,H,W]");
    if (size() <= 0 || images.extent(0) != size()) throw DataError("dataset image/label count mismatch");
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw DataError("dataset label " + std::to_string(y) + " out of range");
    }
    if (norm.mean.size() != static_cast<size_t>(channels()) || norm.std.size() != norm.mean.size()) {
        throw DataError("dataset normalization has wrong channel count");
    }
    for (size_t c = 0; c < norm.mean.size(); ++c) {
        if (!std::isfinite(norm.mean[c]) || !std::isfinite(norm.std[c]) || !(norm.std[c] > 0)) {
            throw DataError("dataset normalization statistics must be finite with std > 0");
        }
    }
}

Normalization compute_normalization(const Dataset& ds) {
    const int64_t N = ds.images.extent(0);
    const int64_t C = ds.images.extent(1);
    const int64_t HW = ds.images.extent(2) * ds.images.extent(3);
    Normalization n;
    n.mean.assign(static_cast<size_t>(C), 0.0);
    n.std.assign(static_cast<size_t>(C), 0.0);
    const float* p = ds.images.ptr();
    const double count = static_cast<double>(N * HW);
    for (int64_t c = 0; c < C; ++c) {
        double s = 0;
        for (int64_t i = 0; i < N; ++i) {
            const float* q = p + (i * C + c) * HW;
            for (int64_t k = 0; k < HW; ++k) s += q[k];
        }
        const double m = s / count;
        double v = 0;
        for (int64_t i = 0; i < N; ++i) {
            const float* q = p + (i * C + c) * HW;
            for (int64_t k = 0; k < HW; ++k) v += (q[k] - m) * (q[k] - m);
        }
        n.mean[static_cast<size_t>(c)] = m;
        n.std[static_cast<size_t>(c)] = std::sqrt(v / count);
    }
    return n;
}

namespace {

constexpr int64_t kCifarPixels = 3072;
constexpr int64_t kCifarRecords = 10000;

std::vector<uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Appends the records of one binary batch file. `label_bytes` leading bytes
// per record, of which `label_offset` selects the label.
void parse_cifar_file(const fs::path& path, int label_bytes, int label_offset, int max_label, int64_t expect_records,
                      std::vector<float>& pixels, std::vector<int>& labels) {
    const auto bytes = read_file(path);
    const int64_t record = label_bytes + kCifarPixels;
    const auto size = static_cast<int64_t>(bytes.size());
    if (size == 0 || size % record != 0) {
        throw DataError("truncated or malformed CIFAR file " + path.string() + ": " + std::to_string(size) +
                        " bytes is not a multiple of the " + std::to_string(record) + "-byte record");
    }
    const int64_t n = size / record;
    if (n != expect_records) {
        throw DataError("CIFAR file " + path.string() + " holds " + std::to_string(n) + " records, expected " +
                        std::to_string(expect_records));
    }
    for (int64_t r = 0; r < n; ++r) {
        const uint8_t* rec = bytes.data() + r * record;
        const int label = rec[label_offset];
        if (label > max_label) {
            throw DataError("CIFAR file " + path.string() + " record " + std::to_string(r) + " has label " +
                            std::to_string(label));
        }
        labels.push_back(label);
        for (int64_t k = 0; k < kCifarPixels; ++k) pixels.push_back(static_cast<float>(rec[label_bytes + k]) / 255.0f);
    }
}

fs::path locate(const fs::path& dir, const std::string& probe, const std::string& subdir) {
    if (fs::exists(dir / probe)) return dir;
    if (fs::exists(dir / subdir / probe)) return dir / subdir;
    throw DataError("dataset file " + probe + " not found under " + dir.string());
}

Dataset make_dataset(std::vector<float> pixels, std::vector<int> labels, int classes, Split split) {
    Dataset ds;
    const auto n = static_cast<int64_t>(labels.size());
    ds.images = Tensor<float>(Shape{n, 3, 32, 32}, std::move(pixels));
    ds.labels = std::move(labels);
    ds.num_classes = classes;
    ds.split = split;
    return ds;
}

DatasetPair finish(Dataset train, Dataset test) {
    train.norm = compute_normalization(train);
    test.norm = train.norm;
    train.validate();
    test.validate();
    return {std::move(train), std::move(test)};
}

}  // namespace

DatasetPair load_cifar10(const fs::path& dir) {
    const fs::path root = locate(dir, "test_batch.bin", "cifar-10-batches-bin");
    std::vector<float> px;
    std::vector<int> lb;
    px.reserve(static_cast<size_t>(5 * kCifarRecords * kCifarPixels));
    for (int b = 1; b <= 5; ++b) {
        parse_cifar_file(root / ("data_batch_" + std::to_string(b) + ".bin"), 1, 0, 9, kCifarRecords, px, lb);
    }
    Dataset train = make_dataset(std::move(px), std::move(lb), 10, Split::Train);
    std::vector<float> tpx;
    std::vector<int> tlb;
    parse_cifar_file(root / "test_batch.bin", 1, 0, 9, kCifarRecords, tpx, tlb);
    Dataset test = make_dataset(std::move(tpx), std::move(tlb), 10, Split::Test);
    return finish(std::move(train), std::move(test));
}

DatasetPair load_cifar100(const fs::path& dir, Cifar100Labels which) {
    const fs::path root = locate(dir, "test.bin", "cifar-100-binary");
    const int offset = which == Cifar100Labels::Coarse ? 0 : 1;
    const int classes = which == Cifar100Labels::Coarse ? 20 : 100;
    std::vector<float> px;
    std::vector<int> lb;
    parse_cifar_file(root / "train.bin", 2, offset, classes - 1, 5 * kCifarRecords, px, lb);
    Dataset train = make_dataset(std::move(px), std::move(lb), classes, Split::Train);
    std::vector<float> tpx;
    std::vector<int> tlb;
    parse_cifar_file(root / "test.bin", 2, offset, classes - 1, kCifarRecords, tpx, tlb);
    Dataset test = make_dataset(std::move(tpx), std::move(tlb), classes, Split::Test);
    return finish(std::move(train), std::move(test));
}

namespace {

std::vector<Tensor<float>> class_patterns(uint64_t seed, int classes, int side) {
    std::mt19937_64 rng(derive_seed(seed, 0));
    std::uniform_real_distribution<double> pos(0.0, static_cast<double>(side));
    std::uniform_real_distribution<double> width(side / 8.0, side / 3.5);
    std::uniform_real_distribution<double> amp(-0.4, 0.4);
    std::vector<Tensor<float>> out;
    for (int k = 0; k < classes; ++k) {
        Tensor<float> p(Shape{3, side, side}, 0.5f);
        for (int blob = 0; blob < 3; ++blob) {
            const double cy = pos(rng), cx = pos(rng), s = width(rng);
            const double a[3] = {amp(rng), amp(rng), amp(rng)};
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < side; ++y) {
                    for (int x = 0; x < side; ++x) {
                        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                        p.at(c, y, x) += static_cast<float>(a[c] * std::exp(-d2 / (2 * s * s)));
                    }
                }
            }
        }
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

Dataset synth_dataset(uint64_t seed, int64_t n, int classes, int side, Split split, double noise, double mix) {
    if (classes < 2 || n < classes || side < 8 || noise < 0 || mix < 0 || mix >= 1) {
        throw DataError("synth_dataset: invalid sizes (need classes >= 2, n >= classes, side >= 8, 0 <= mix < 1)");
    }
    const auto patterns = class_patterns(seed, classes, side);
    std::mt19937_64 rng(derive_seed(seed, split == Split::Train ? 1 : 2));
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> blend(0.0, mix);
    std::uniform_int_distribution<int> other(0, classes - 2);

    Dataset ds;
    ds.num_classes = classes;
    ds.split = split;
    ds.images = Tensor<float>(Shape{n, 3, side, side});
    ds.labels.resize(static_cast<size_t>(n));
    const int64_t per = 3LL * side * side;
    for (int64_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(i % classes);
        int j = other(rng);
        if (j >= k) ++j;
        const double t = blend(rng);
        ds.labels[static_cast<size_t>(i)] = k;
        float* dst = ds.images.ptr() + i * per;
        const float* pk = patterns[static_cast<size_t>(k)].ptr();
        const float* pj = patterns[static_cast<size_t>(j)].ptr();
        for (int64_t q = 0; q < per; ++q) {
            const double v = (1 - t) * pk[q] + t * pj[q] + noise * nd(rng);
            dst[q] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    ds.norm = compute_normalization(ds);
    ds.validate();
    return ds;
}

DatasetPair synth_split(const SynthSpec& spec) {
    Dataset train = synth_dataset(spec.seed, spec.n_train, spec.classes, spec.side, Split::Train, spec.noise, spec.mix);
    Dataset test = synth_dataset(spec.seed, spec.n_test, spec.classes, spec.side, Split::Test, spec.noise, spec.mix);
    test.norm = train.norm;
    return {std::move(train), std::move(test)};
}

void AugmentPolicy::validate(int side) const {
    if (crop_padding < 0) throw std::invalid_argument("augment: crop_padding must be >= 0");
    if (cutout_size < 0 || cutout_size > side) throw std::invalid_argument("augment: cutout_size must be in [0, side]");
}

Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng, const AugmentPolicy& policy,
                      const Normalization& norm) {
    const int64_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
    Tensor<float> cur = image;
    if (policy.enabled) {
        if (policy.horizontal_flip && std::bernoulli_distribution(0.5)(rng)) {
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < H; ++y) {
                    float* row = cur.ptr() + (c * H + y) * W;
                    std::reverse(row, row + W);
                }
        }
        if (policy.crop_padding > 0) {
            const int p = policy.crop_padding;
            std::uniform_int_distribution<int> off(0, 2 * p);
            const int oy = off(rng) - p;
            const int ox = off(rng) - p;
            Tensor<float> cropped(cur.shape(), 0.0f);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + oy;
                    if (sy < 0 || sy >= H) continue;
                    for (int64_t x = 0; x < W; ++x) {
                        const int64_t sx = x + ox;
                        if (sx >= 0 && sx < W) cropped.ptr()[(c * H + y) * W + x] = cur.ptr()[(c * H + sy) * W + sx];
                    }
                }
            cur = std::move(cropped);
        }
        if (policy.cutout_size > 0) {
            std::uniform_int_distribution<int64_t> cy_d(0, H - 1);
            std::uniform_int_distribution<int64_t> cx_d(0, W - 1);
            const int64_t cy = cy_d(rng), cx = cx_d(rng);
            const int64_t half = policy.cutout_size / 2;
            const int64_t y0 = std::max<int64_t>(0, cy - half), y1 = std::min<int64_t>(H, cy - half + policy.cutout_size);
            const int64_t x0 = std::max<int64_t>(0, cx - half), x1 = std::min<int64_t>(W, cx - half + policy.cutout_size);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = y0; y < y1; ++y)
                    for (int64_t x = x0; x < x1; ++x) cur.ptr()[(c * H + y) * W + x] = 0.0f;
        }
    }
    for (int64_t c = 0; c < C; ++c) {
        const auto m = static_cast<float>(norm.mean.at(static_cast<size_t>(c)));
        const auto inv = static_cast<float>(1.0 / norm.std.at(static_cast<size_t>(c)));
        float* plane = cur.ptr() + c * H * W;
        for (int64_t k = 0; k < H * W; ++k) plane[k] = (plane[k] - m) * inv;
    }
    return cur;
}

Tensor<float> normalized_images(const Dataset& ds, int64_t begin, int64_t end) {
    if (begin < 0 || end > ds.size() || begin >= end) throw std::out_of_range("normalized_images: bad sample range");
    const int64_t C = ds.channels(), HW = static_cast<int64_t>(ds.height()) * ds.width();
    Tensor<float> out(Shape{end - begin, C, ds.height(), ds.width()});
    const float* src = ds.images.ptr() + begin * C * HW;
    float* dst = out.ptr();
    for (int64_t i = 0; i < end - begin; ++i) {
        for (int64_t c = 0; c < C; ++c) {
            const auto m = static_cast<float>(ds.norm.mean[static_cast<size_t>(c)]);
            const auto inv = static_cast<float>(1.0 / ds.norm.std[static_cast<size_t>(c)]);
            for (int64_t k = 0; k < HW; ++k, ++src, ++dst) *dst = (*src - m) * inv;
        }
    }
    return out;
}

BatchIterator::BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t seed, AugmentPolicy policy, bool training)
    : ds_(&ds), batch_size_(batch_size), seed_(seed), policy_(policy), training_(training) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (batch_size > ds.size()) {
        throw std::invalid_argument("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                                    std::to_string(ds.size()));
    }
    if (training) policy.validate(std::min(ds.height(), ds.width()));
    order_.resize(static_cast<size_t>(ds.size()));
    std::iota(order_.begin(), order_.end(), int64_t{0});
    if (training) {
        std::mt19937_64 rng(seed);
        std::shuffle(order_.begin(), order_.end(), rng);
    }
    const int64_t rem = ds.size() % batch_size;
    if (rem != 0 && rem < kMinBatch) order_.resize(order_.size() - static_cast<size_t>(rem));
}

BatchIterator BatchIterator::train(const Dataset& ds, int64_t batch_size, uint64_t shuffle_seed,
                                   const AugmentPolicy& policy) {
    return BatchIterator(ds, batch_size, shuffle_seed, policy, true);
}

BatchIterator BatchIterator::test(const Dataset& ds, int64_t batch_size) {
    return BatchIterator(ds, std::min(batch_size, ds.size()), 0, AugmentPolicy{}, false);
}

int64_t BatchIterator::num_batches() const {
    const auto n = static_cast<int64_t>(order_.size());
    return (n + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
    const auto n = static_cast<int64_t>(order_.size());
    if (cursor_ >= n) return std::nullopt;
    const int64_t b = std::min(batch_size_, n - cursor_);
    const int64_t C = ds_->channels(), H = ds_->height(), W = ds_->width();
    const int64_t per = C * H * W;
    Batch out;
    out.images = Tensor<float>(Shape{b, C, H, W});
    out.labels.resize(static_cast<size_t>(b));
    out.indices.resize(static_cast<size_t>(b));
    const AugmentPolicy none{0, 0, false, false};
    for (int64_t k = 0; k < b; ++k) {
        const int64_t pos = cursor_ + k;
        const int64_t idx = order_[static_cast<size_t>(pos)];
        out.indices[static_cast<size_t>(k)] = idx;
        out.labels[static_cast<size_t>(k)] = ds_->labels[static_cast<size_t>(idx)];
        std::vector<float> px(ds_->images.ptr() + idx * per, ds_->images.ptr() + (idx + 1) * per);
        Tensor<float> img(Shape{C, H, W}, std::move(px));
        std::mt19937_64 rng(derive_seed(seed_, static_cast<uint64_t>(pos)));
        Tensor<float> aug = augment(img, rng, training_ ? policy_ : none, ds_->norm);
        std::copy(aug.ptr(), aug.ptr() + per, out.images.ptr() + k * per);
    }
    cursor_ += b;
    return out;
}

}  // namespace dissim
