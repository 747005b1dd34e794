#include "dissim/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dissim {

namespace {

void require_aligned(size_t a, size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": inputs have different sample counts");
    if (a == 0) throw std::invalid_argument(std::string(what) + ": no samples");
}

double mean_of(std::span<const uint8_t> c) {
    int64_t s = 0;
    for (uint8_t v : c) s += v != 0;
    return static_cast<double>(s) / static_cast<double>(c.size());
}

int argmax_row(const double* row, int64_t k) { return static_cast<int>(std::max_element(row, row + k) - row); }

std::string fmt(const std::optional<double>& v) {
    if (!v) return "undefined";
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
}

std::string fmt(double v) { return fmt(std::optional<double>(v)); }

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json("undefined"); }

template <typename Get>
std::pair<std::optional<double>, int> mean_defined(const std::vector<PairStats>& pairs, Get get) {
    double s = 0;
    int n = 0, missing = 0;
    for (const auto& p : pairs) {
        if (auto v = get(p)) {
            s += *v;
            ++n;
        } else {
            ++missing;
        }
    }
    return {n > 0 ? std::optional<double>(s / n) : std::nullopt, missing};
}

}  // namespace

PredictionSet PredictionSet::from_logits(std::string id, const Tensor<float>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("predictions: logits must be [N, classes]");
    const int64_t N = logits.extent(0), K = logits.extent(1);
    require_aligned(static_cast<size_t>(N), labels.size(), "predictions");
    PredictionSet p;
    p.model_id = std::move(id);
    p.softmax = Tensor<double>(Shape{N, K});
    p.argmax.resize(static_cast<size_t>(N));
    p.correct.resize(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
        const float* z = logits.ptr() + i * K;
        double* s = p.softmax.ptr() + i * K;
        const double mx = *std::max_element(z, z + K);
        double tot = 0;
        for (int64_t k = 0; k < K; ++k) tot += s[k] = std::exp(static_cast<double>(z[k]) - mx);
        for (int64_t k = 0; k < K; ++k) s[k] /= tot;
        // Argmax on the logits keeps ties that softmax rounding could break.
        const int a = static_cast<int>(std::max_element(z, z + K) - z);
        p.argmax[static_cast<size_t>(i)] = a;
        p.correct[static_cast<size_t>(i)] = a == labels[static_cast<size_t>(i)];
    }
    return p;
}

double PredictionSet::accuracy() const { return mean_of(correct); }

void PredictionSet::validate(std::span<const int> labels) const {
    const int64_t N = size();
    if (softmax.rank() != 2 || softmax.extent(0) != N || static_cast<int64_t>(correct.size()) != N) {
        throw ShapeError("prediction set " + model_id + ": inconsistent sizes");
    }
    require_aligned(static_cast<size_t>(N), labels.size(), "prediction set");
    const int64_t K = softmax.extent(1);
    for (int64_t i = 0; i < N; ++i) {
        const double* row = softmax.ptr() + i * K;
        double s = 0;
        for (int64_t k = 0; k < K; ++k) s += row[k];
        if (std::abs(s - 1.0) > 1e-5) throw std::invalid_argument("prediction set " + model_id + ": row not normalized");
        const int a = argmax[static_cast<size_t>(i)];
        if (a < 0 || a >= K || row[a] < row[argmax_row(row, K)]) {
            throw std::invalid_argument("prediction set " + model_id + ": argmax inconsistent with softmax");
        }
        if ((correct[static_cast<size_t>(i)] != 0) != (a == labels[static_cast<size_t>(i)])) {
            throw std::invalid_argument("prediction set " + model_id + ": correctness inconsistent with labels");
        }
    }
}

std::optional<double> cohens_kappa(std::span<const uint8_t> c1, std::span<const uint8_t> c2) {
    require_aligned(c1.size(), c2.size(), "kappa");
    const double p1 = mean_of(c1), p2 = mean_of(c2);
    int64_t agree = 0;
    for (size_t i = 0; i < c1.size(); ++i) agree += (c1[i] != 0) == (c2[i] != 0);
    const double obs = static_cast<double>(agree) / static_cast<double>(c1.size());
    const double exp = p1 * p2 + (1 - p1) * (1 - p2);
    if (exp >= 1.0) return std::nullopt;
    return (obs - exp) / (1 - exp);
}

std::optional<double> error_overlap_kappa(std::span<const uint8_t> c1, std::span<const uint8_t> c2) {
    require_aligned(c1.size(), c2.size(), "kappa");
    const double p1 = mean_of(c1), p2 = mean_of(c2);
    int64_t both_wrong = 0;
    for (size_t i = 0; i < c1.size(); ++i) both_wrong += c1[i] == 0 && c2[i] == 0;
    const double obs = static_cast<double>(both_wrong) / static_cast<double>(c1.size());
    const double exp = (1 - p1) * (1 - p2);
    if (exp >= 1.0) return std::nullopt;
    return (obs - exp) / (1 - exp);
}

double jsd(const Tensor<double>& P, const Tensor<double>& Q) {
    if (P.rank() != 2 || P.shape() != Q.shape()) throw ShapeError("jsd: expected two aligned [N, classes] tensors");
    const int64_t N = P.extent(0), K = P.extent(1);
    double total = 0;
    for (int64_t i = 0; i < N; ++i) {
        const double* p = P.ptr() + i * K;
        const double* q = Q.ptr() + i * K;
        double sp = 0, sq = 0, d = 0;
        for (int64_t k = 0; k < K; ++k) {
            if (p[k] < 0 || q[k] < 0) throw std::invalid_argument("jsd: negative probability");
            sp += p[k];
            sq += q[k];
            const double m = 0.5 * (p[k] + q[k]);
            if (p[k] > 0) d += 0.5 * p[k] * std::log2(p[k] / m);
            if (q[k] > 0) d += 0.5 * q[k] * std::log2(q[k] / m);
        }
        if (std::abs(sp - 1) > 1e-5 || std::abs(sq - 1) > 1e-5) {
            throw std::invalid_argument("jsd: row " + std::to_string(i) + " is not a distribution");
        }
        total += std::clamp(d, 0.0, 1.0);
    }
    return 100.0 * total / static_cast<double>(N);
}

EdrCounts edr_counts(std::span<const int> pred1, std::span<const int> pred2, std::span<const int> truth) {
    require_aligned(pred1.size(), pred2.size(), "edr");
    require_aligned(pred1.size(), truth.size(), "edr");
    EdrCounts c;
    for (size_t i = 0; i < truth.size(); ++i) {
        if (pred1[i] == truth[i] || pred2[i] == truth[i]) continue;
        ++c.joint_errors;
        if (pred1[i] == pred2[i]) {
            ++c.identical;
        } else {
            ++c.different;
        }
    }
    return c;
}

std::optional<double> edr(std::span<const int> pred1, std::span<const int> pred2, std::span<const int> truth) {
    const auto c = edr_counts(pred1, pred2, truth);
    if (c.identical == 0) return std::nullopt;
    return static_cast<double>(c.different) / static_cast<double>(c.identical);
}

double ensemble_accuracy(std::span<const PredictionSet> sets, std::span<const int> truth) {
    if (sets.empty()) throw std::invalid_argument("ensemble_accuracy: no models");
    const Shape& s = sets[0].softmax.shape();
    for (const auto& p : sets) {
        if (p.softmax.shape() != s) throw ShapeError("ensemble_accuracy: misaligned prediction sets");
    }
    const int64_t N = s[0], K = s[1];
    require_aligned(static_cast<size_t>(N), truth.size(), "ensemble_accuracy");
    std::vector<double> row(static_cast<size_t>(K));
    int64_t correct = 0;
    for (int64_t i = 0; i < N; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (const auto& p : sets) {
            const double* r = p.softmax.ptr() + i * K;
            for (int64_t k = 0; k < K; ++k) row[static_cast<size_t>(k)] += r[k];
        }
        correct += argmax_row(row.data(), K) == truth[static_cast<size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(N);
}

DiversityReport pairwise_report(std::span<const PredictionSet> sets, std::span<const int> truth) {
    if (sets.size() < 2) throw std::invalid_argument("pairwise_report: needs at least 2 models");
    DiversityReport r;
    r.n_models = static_cast<int>(sets.size());
    for (const auto& p : sets) {
        p.validate(truth);
        r.model_ids.push_back(p.model_id);
        r.accuracies.push_back(p.accuracy());
    }
    r.ensemble_accuracy = ensemble_accuracy(sets, truth);
    double jsd_sum = 0, ens_sum = 0;
    for (int a = 0; a < r.n_models; ++a) {
        for (int b = a + 1; b < r.n_models; ++b) {
            const auto& pa = sets[static_cast<size_t>(a)];
            const auto& pb = sets[static_cast<size_t>(b)];
            PairStats ps;
            ps.a = a;
            ps.b = b;
            ps.kappa = cohens_kappa(pa.correct, pb.correct);
            ps.kappa_error_overlap = error_overlap_kappa(pa.correct, pb.correct);
            ps.jsd = jsd(pa.softmax, pb.softmax);
            ps.edr_counts = edr_counts(pa.argmax, pb.argmax, truth);
            ps.edr = edr(pa.argmax, pb.argmax, truth);
            const PredictionSet both[] = {pa, pb};
            ps.ensemble_accuracy = ensemble_accuracy(both, truth);
            jsd_sum += ps.jsd;
            ens_sum += ps.ensemble_accuracy;
            r.pairs.push_back(std::move(ps));
        }
    }
    const double np = static_cast<double>(r.pairs.size());
    r.mean_jsd = jsd_sum / np;
    r.mean_pair_ensemble_accuracy = ens_sum / np;
    std::tie(r.mean_kappa, r.kappa_degenerate) = mean_defined(r.pairs, [](const PairStats& p) { return p.kappa; });
    std::tie(r.mean_kappa_error_overlap, r.kappa_error_overlap_degenerate) =
        mean_defined(r.pairs, [](const PairStats& p) { return p.kappa_error_overlap; });
    std::tie(r.mean_edr, r.edr_undefined) = mean_defined(r.pairs, [](const PairStats& p) { return p.edr; });
    return r;
}

nlohmann::json report_to_json(const DiversityReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["n_models"] = r.n_models;
    j["model_ids"] = r.model_ids;
    j["accuracies"] = r.accuracies;
    j["ensemble_rule"] = kEnsembleRule;
    j["ensemble_accuracy"] = r.ensemble_accuracy;
    j["kappa_definition"] = "error_consistency";
    j["jsd_unit"] = "percent_log2";
    auto pairs = nlohmann::json::array();
    for (const auto& p : r.pairs) {
        pairs.push_back({{"a", p.a},
                         {"b", p.b},
                         {"model_a", r.model_ids[static_cast<size_t>(p.a)]},
                         {"model_b", r.model_ids[static_cast<size_t>(p.b)]},
                         {"kappa", opt(p.kappa)},
                         {"kappa_error_overlap", opt(p.kappa_error_overlap)},
                         {"jsd", p.jsd},
                         {"edr", opt(p.edr)},
                         {"joint_errors", p.edr_counts.joint_errors},
                         {"identical_errors", p.edr_counts.identical},
                         {"different_errors", p.edr_counts.different},
                         {"ensemble_accuracy", p.ensemble_accuracy}});
    }
    j["pairs"] = pairs;
    j["mean"] = {{"kappa", opt(r.mean_kappa)},
                 {"kappa_error_overlap", opt(r.mean_kappa_error_overlap)},
                 {"jsd", r.mean_jsd},
                 {"edr", opt(r.mean_edr)},
                 {"pair_ensemble_accuracy", r.mean_pair_ensemble_accuracy}};
    j["degenerate"] = {{"kappa", r.kappa_degenerate},
                       {"kappa_error_overlap", r.kappa_error_overlap_degenerate},
                       {"edr", r.edr_undefined}};
    return j;
}

std::string report_to_csv(const DiversityReport& r) {
    std::ostringstream os;
    os << "# schema_version=" << kReportSchemaVersion << " ensemble_rule=" << kEnsembleRule << "\n";
    os << "pair,model_a,model_b,kappa,kappa_error_overlap,jsd,edr,joint_errors,identical_errors,different_errors,"
          "ensemble_accuracy\n";
    for (const auto& p : r.pairs) {
        os << p.a << "-" << p.b << "," << r.model_ids[static_cast<size_t>(p.a)] << ","
           << r.model_ids[static_cast<size_t>(p.b)] << "," << fmt(p.kappa) << "," << fmt(p.kappa_error_overlap) << ","
           << fmt(p.jsd) << "," << fmt(p.edr) << "," << p.edr_counts.joint_errors << "," << p.edr_counts.identical
           << "," << p.edr_counts.different << "," << fmt(p.ensemble_accuracy) << "\n";
    }
    os << "mean,,," << fmt(r.mean_kappa) << "," << fmt(r.mean_kappa_error_overlap) << "," << fmt(r.mean_jsd) << ","
       << fmt(r.mean_edr) << ",,,," << fmt(r.mean_pair_ensemble_accuracy) << "\n";
    return os.str();
}

}  // namespace dissim
