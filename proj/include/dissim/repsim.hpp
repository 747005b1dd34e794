#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dissim/autodiff.hpp"

namespace dissim {

struct Dataset;
class Model;

/// Raised when a similarity is undefined for its inputs (collapsed or
/// constant representations, too few samples, misaligned streams).
class SimilarityError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Metric { L2Corr, ExpVar, LinCKA };

std::string_view metric_name(Metric m);
/// Accepts "l2corr", "expvar", "lincka" (case-insensitive).
Metric parse_metric(std::string_view name);
/// Closed interval every score of the metric lies in. Linear CKA built on the
/// unbiased HSIC is a cosine between U-centered Gram matrices and can be
/// negative, so its interval is [-1, 1].
std::pair<double, double> metric_bounds(Metric m);

/// Channels whose population variance over their samples falls below this
/// are treated as degenerate: their per-channel score is 0 and carries no
/// gradient.
inline constexpr double kDegenerateVariance = 1e-8;

/// Per-channel Pearson correlation of two equally shaped representations.
/// Axis 1 indexes channels; all other axes index samples. Result shape [C].
template <typename T> Var<T> channel_pearson(const Var<T>& z, const Var<T>& zhat);

/// Per-channel coefficient of determination of `zhat` as a prediction of
/// `z`: 1 - Σ(z-ẑ)² / Σ(z-z̄)². Result shape [C].
template <typename T> Var<T> channel_r2(const Var<T>& z, const Var<T>& zhat);

/// mean_c celu(r_c), in [e⁻¹-1, 1].
template <typename T> Var<T> l2corr(const Var<T>& z, const Var<T>& zhat);

/// mean_c celu(R²_c), in [-1, 1].
template <typename T> Var<T> expvar(const Var<T>& z, const Var<T>& zhat);

/// Unbiased HSIC of two n×n kernel matrices (n ≥ 4) with their diagonals
/// ignored.
template <typename T> Var<T> hsic_unbiased(const Var<T>& K, const Var<T>& L);

/// Single-batch linear CKA. Each input is flattened to n×(rest) with n its
/// leading extent.
template <typename T> Var<T> lincka_batch(const Var<T>& X, const Var<T>& Y);

/// Dispatches to l2corr, expvar or lincka_batch.
template <typename T> Var<T> similarity(Metric m, const Var<T>& z, const Var<T>& zhat);

// ---------------------------------------------------------------------------
// Evaluation mode (no tape).
// ---------------------------------------------------------------------------

/// Linear kernel XXᵀ of X flattened to n×(rest), in double precision.
template <typename T> Tensor<double> gram(const Tensor<T>& X);

double hsic_unbiased_value(const Tensor<double>& K, const Tensor<double>& L);

/// Accumulates Σ HSIC(K_i,L_i), Σ HSIC(K_i,K_i), Σ HSIC(L_i,L_i) over
/// batches and combines them into one CKA value.
class CkaAccumulator {
   public:
    template <typename T>
    void add(const Tensor<T>& X, const Tensor<T>& Y) {
        add_grams(gram(X), gram(Y));
    }
    void add_grams(const Tensor<double>& K, const Tensor<double>& L);
    double value() const;
    int batches() const { return batches_; }

   private:
    double kl_ = 0, kk_ = 0, ll_ = 0;
    int batches_ = 0;
};

/// CKA accumulated over aligned batch lists.
template <typename T>
double lincka_dataset(std::span<const Tensor<T>> xs, std::span<const Tensor<T>> ys);

/// Entry (i,j) is the dataset CKA between tap tapsA[i] of `a` and tap
/// tapsB[j] of `b`, evaluated in eval mode over `data` in test order.
Tensor<double> cka_heatmap(Model& a, Model& b, const Dataset& data, int64_t batch_size,
                           std::span<const int> taps_a, std::span<const int> taps_b);

}  // namespace dissim
