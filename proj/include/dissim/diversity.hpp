#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dissim/tensor.hpp"
#include "json.hpp"

namespace dissim {

/// One model's predictions on an aligned evaluation set.
struct PredictionSet {
    std::string model_id;
    Tensor<double> softmax;        // [N, classes], rows sum to 1
    std::vector<int> argmax;       // lowest index on ties
    std::vector<uint8_t> correct;  // 1 where argmax equals the label

    /// Softmax (computed in double with max subtraction) of `logits`.
    static PredictionSet from_logits(std::string id, const Tensor<float>& logits, std::span<const int> labels);
    int64_t size() const { return static_cast<int64_t>(argmax.size()); }
    double accuracy() const;
    void validate(std::span<const int> labels) const;
};

/// Error consistency: κ = (c_obs − c_exp)/(1 − c_exp) with c_obs the fraction
/// of samples on which both are right or both wrong and
/// c_exp = p₁p₂ + (1−p₁)(1−p₂). Empty when c_exp = 1.
std::optional<double> cohens_kappa(std::span<const uint8_t> correct1, std::span<const uint8_t> correct2);

/// Both-wrong overlap variant: c_obs = fraction both wrong,
/// c_exp = (1−p₁)(1−p₂). Empty when c_exp = 1.
std::optional<double> error_overlap_kappa(std::span<const uint8_t> correct1, std::span<const uint8_t> correct2);

/// Mean per-sample Jensen-Shannon divergence (base 2) in percent.
double jsd(const Tensor<double>& P, const Tensor<double>& Q);

struct EdrCounts {
    int64_t joint_errors = 0;
    int64_t identical = 0;
    int64_t different = 0;
};
EdrCounts edr_counts(std::span<const int> pred1, std::span<const int> pred2, std::span<const int> truth);

/// Different wrong labels / identical wrong labels over the samples both
/// models get wrong. Empty when there are no identical joint errors.
std::optional<double> edr(std::span<const int> pred1, std::span<const int> pred2, std::span<const int> truth);

/// Accuracy of the argmax of the mean softmax.
double ensemble_accuracy(std::span<const PredictionSet> sets, std::span<const int> truth);

inline constexpr const char* kEnsembleRule = "mean_softmax_argmax";
inline constexpr int kReportSchemaVersion = 1;

struct PairStats {
    int a = 0;
    int b = 0;
    std::optional<double> kappa;
    std::optional<double> kappa_error_overlap;
    double jsd = 0;
    std::optional<double> edr;
    EdrCounts edr_counts;
    double ensemble_accuracy = 0;
};

struct DiversityReport {
    int n_models = 0;
    std::vector<std::string> model_ids;
    std::vector<double> accuracies;
    double ensemble_accuracy = 0;
    std::vector<PairStats> pairs;
    // Means over non-degenerate pairs; empty if every pair is degenerate.
    std::optional<double> mean_kappa;
    std::optional<double> mean_kappa_error_overlap;
    double mean_jsd = 0;
    std::optional<double> mean_edr;
    double mean_pair_ensemble_accuracy = 0;
    int kappa_degenerate = 0;
    int kappa_error_overlap_degenerate = 0;
    int edr_undefined = 0;
};

DiversityReport pairwise_report(std::span<const PredictionSet> sets, std::span<const int> truth);

nlohmann::json report_to_json(const DiversityReport& r);
/// One row per pair followed by a "mean" row; undefined values are written
/// as the literal "undefined".
std::string report_to_csv(const DiversityReport& r);

}  // namespace dissim
