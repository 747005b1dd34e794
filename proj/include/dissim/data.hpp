#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dissim/tensor.hpp"

namespace dissim {

/// Raised for unreadable, missing or malformed dataset files.
class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Split { Train, Test };

/// Per-channel normalization statistics.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> std;
};

struct Dataset {
    Tensor<float> images;  // [N,C,H,W], values in [0,1]
    std::vector<int> labels;
    int num_classes = 0;
    Split split = Split::Train;
    Normalization norm;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int channels() const { return static_cast<int>(images.extent(1)); }
    int height() const { return static_cast<int>(images.extent(2)); }
    int width() const { return static_cast<int>(images.extent(3)); }
    void validate() const;
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

/// Per-channel mean and population standard deviation over all pixels.
Normalization compute_normalization(const Dataset& ds);

/// Reads the CIFAR-10 binary distribution (data_batch_1..5.bin and
/// test_batch.bin, 10000 records of 3073 bytes each) from `dir` or from
/// `dir/cifar-10-batches-bin`. Normalization is computed on the train split
/// and attached to both splits.
DatasetPair load_cifar10(const std::filesystem::path& dir);

enum class Cifar100Labels { Coarse, Fine };

/// Reads the CIFAR-100 binary distribution (train.bin, test.bin; records of
/// 1 coarse + 1 fine label byte and 3072 pixel bytes).
DatasetPair load_cifar100(const std::filesystem::path& dir, Cifar100Labels labels = Cifar100Labels::Fine);

/// Class-conditional blob images: each class owns a smooth mean pattern made
/// of Gaussian blobs; a sample is its class pattern blended with a random
/// other class pattern (weight uniform in [0, mix)) plus pixel noise.
struct SynthSpec {
    uint64_t seed = 0;
    int64_t n_train = 2000;
    int64_t n_test = 500;
    int classes = 10;
    int side = 16;
    double noise = 0.25;
    double mix = 0.55;
};

/// Labels are balanced (class i%classes for sample i before shuffling) and the
/// class patterns depend only on `seed`, so both splits share them.
Dataset synth_dataset(uint64_t seed, int64_t n, int classes, int side, Split split = Split::Train,
                      double noise = 0.25, double mix = 0.55);
DatasetPair synth_split(const SynthSpec& spec);

struct AugmentPolicy {
    int crop_padding = 4;
    int cutout_size = 16;
    bool horizontal_flip = true;
    bool enabled = true;

    void validate(int side) const;
    bool operator==(const AugmentPolicy&) const = default;
};

/// Flip → pad-and-random-crop → cutout → normalize, for a single [C,H,W]
/// image in [0,1]. With the policy disabled only normalization is applied.
Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng, const AugmentPolicy& policy,
                      const Normalization& norm);

/// Normalized copy of samples [begin, end) in index order.
Tensor<float> normalized_images(const Dataset& ds, int64_t begin, int64_t end);

struct Batch {
    Tensor<float> images;  // normalized [B,C,H,W]
    std::vector<int> labels;
    std::vector<int64_t> indices;
};

/// Smallest batch ever yielded; trailing partial batches below it are dropped.
inline constexpr int64_t kMinBatch = 4;

/// Deterministic batch iteration. Training iteration visits a permutation
/// determined by `shuffle_seed` and augments each sample with its own
/// generator seeded from (shuffle_seed, position); test iteration is
/// sequential and only normalizes.
class BatchIterator {
   public:
    static BatchIterator train(const Dataset& ds, int64_t batch_size, uint64_t shuffle_seed,
                               const AugmentPolicy& policy);
    static BatchIterator test(const Dataset& ds, int64_t batch_size);

    std::optional<Batch> next();
    int64_t num_batches() const;
    /// Sample indices in delivery order (after dropping the short remainder).
    const std::vector<int64_t>& order() const { return order_; }

   private:
    BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t seed, AugmentPolicy policy, bool training);

    const Dataset* ds_;
    int64_t batch_size_;
    uint64_t seed_;
    AugmentPolicy policy_;
    bool training_;
    std::vector<int64_t> order_;
    int64_t cursor_ = 0;
};

/// Mixes a base seed with a stream id (splitmix64 finalizer).
uint64_t derive_seed(uint64_t base, uint64_t stream);

}  // namespace dissim
