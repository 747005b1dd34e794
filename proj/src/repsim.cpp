#include "dissim/repsim.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>

#include "dissim/data.hpp"
#include "dissim/nn.hpp"

namespace dissim {

std::string_view metric_name(Metric m) {
    switch (m) {
        case Metric::L2Corr: return "l2corr";
        case Metric::ExpVar: return "expvar";
        case Metric::LinCKA: return "lincka";
    }
    return "unknown";
}

Metric parse_metric(std::string_view name) {
    std::string s(name);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "l2corr") return Metric::L2Corr;
    if (s == "expvar") return Metric::ExpVar;
    if (s == "lincka" || s == "cka") return Metric::LinCKA;
    throw std::invalid_argument("unknown similarity metric '" + std::string(name) + "'");
}

std::pair<double, double> metric_bounds(Metric m) {
    switch (m) {
        case Metric::L2Corr: return {std::expm1(-1.0), 1.0};
        case Metric::ExpVar: return {-1.0, 1.0};
        case Metric::LinCKA: return {-1.0, 1.0};
    }
    return {0.0, 0.0};
}

namespace {

std::vector<int> sample_axes(const Shape& s) {
    if (s.size() < 2) throw ShapeError("similarity: representation needs a channel axis (rank >= 2)");
    std::vector<int> axes;
    for (int ax = 0; ax < static_cast<int>(s.size()); ++ax) {
        if (ax != 1) axes.push_back(ax);
    }
    return axes;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
}

// Deviations from the channel mean and their per-channel sum of squares.
template <typename T>
struct Centered {
    Var<T> dev;
    Var<T> ss;
};

template <typename T>
Centered<T> center(const Var<T>& z, const std::vector<int>& axes) {
    auto dev = sub(z, mean(z, axes, true));
    return {dev, sum(mul(dev, dev), axes)};
}

// 1 where the channel variance is usable, 0 where it is degenerate.
template <typename T>
Tensor<T> usable_mask(const Tensor<T>& ss, int64_t count) {
    Tensor<T> m(ss.shape());
    for (size_t c = 0; c < ss.size(); ++c) {
        m[c] = static_cast<double>(ss[c]) / static_cast<double>(count) >= kDegenerateVariance ? T{1} : T{0};
    }
    return m;
}

// ss on usable channels, 1 elsewhere, so that sqrt and division stay finite.
template <typename T>
Var<T> safe_denominator(const Var<T>& ss, const Tensor<T>& mask) {
    Tensor<T> fill(mask.shape());
    for (size_t c = 0; c < mask.size(); ++c) fill[c] = T{1} - mask[c];
    auto* tape = ss.tape();
    return add(mul(ss, tape->constant(mask)), tape->constant(std::move(fill)));
}

int64_t samples_per_channel(const Shape& s) { return shape_numel(s) / s[1]; }

template <typename T>
Var<T> flatten_rows(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("lincka: input needs rank >= 2");
    const int64_t n = s[0];
    return s.size() == 2 ? x : reshape(x, Shape{n, shape_numel(s) / n});
}

}  // namespace

template <typename T>
Var<T> channel_pearson(const Var<T>& z, const Var<T>& zhat) {
    require_same_shape(z, zhat, "l2corr");
    const auto axes = sample_axes(z.shape());
    const int64_t n = samples_per_channel(z.shape());
    auto a = center(z, axes);
    auto b = center(zhat, axes);
    Tensor<T> mask = usable_mask(a.ss.value(), n);
    const Tensor<T> mb = usable_mask(b.ss.value(), n);
    for (size_t c = 0; c < mask.size(); ++c) mask[c] *= mb[c];
    auto cov = sum(mul(a.dev, b.dev), axes);
    auto denom = mul(sqrt(safe_denominator(a.ss, mask)), sqrt(safe_denominator(b.ss, mask)));
    return mul(div(cov, denom), z.tape()->constant(mask));
}

template <typename T>
Var<T> channel_r2(const Var<T>& z, const Var<T>& zhat) {
    require_same_shape(z, zhat, "expvar");
    const auto axes = sample_axes(z.shape());
    const int64_t n = samples_per_channel(z.shape());
    auto a = center(z, axes);
    const Tensor<T> mask = usable_mask(a.ss.value(), n);
    auto resid = sub(z, zhat);
    auto rss = sum(mul(resid, resid), axes);
    auto r2 = sub(z.tape()->constant(Tensor<T>(mask.shape(), T{1})), div(rss, safe_denominator(a.ss, mask)));
    return mul(r2, z.tape()->constant(mask));
}

template <typename T>
Var<T> l2corr(const Var<T>& z, const Var<T>& zhat) {
    return mean(celu(channel_pearson(z, zhat)));
}

template <typename T>
Var<T> expvar(const Var<T>& z, const Var<T>& zhat) {
    return mean(celu(channel_r2(z, zhat)));
}

template <typename T>
Var<T> hsic_unbiased(const Var<T>& K, const Var<T>& L) {
    const Shape& s = K.shape();
    if (s.size() != 2 || s[0] != s[1] || L.shape() != s) {
        throw ShapeError("hsic: expected two n×n matrices, got " + shape_str(s) + " and " + shape_str(L.shape()));
    }
    const int64_t n = s[0];
    if (n < 4) throw SimilarityError("hsic: needs at least 4 samples, got " + std::to_string(n));
    auto* tape = K.tape();
    Tensor<T> off(s, T{1});
    for (int64_t i = 0; i < n; ++i) off[static_cast<size_t>(i * n + i)] = T{0};
    auto offd = tape->constant(std::move(off));
    auto Kt = mul(K, offd);
    auto Lt = mul(L, offd);
    const T nn = static_cast<T>(n);
    auto trace = sum(mul(Kt, transpose(Lt)));
    auto sums = mul(sum(Kt), sum(Lt));
    auto cross = sum(mul(sum(Kt, {0}), sum(Lt, {1})));
    auto inner = add(trace, scale(sums, T{1} / ((nn - 1) * (nn - 2))));
    inner = sub(inner, scale(cross, T{2} / (nn - 2)));
    return scale(inner, T{1} / (nn * (nn - 3)));
}

template <typename T>
Var<T> lincka_batch(const Var<T>& X, const Var<T>& Y) {
    if (X.shape().empty() || Y.shape().empty() || X.extent(0) != Y.extent(0)) {
        throw ShapeError("lincka: inputs must share the leading sample axis");
    }
    auto x = flatten_rows(X);
    auto y = flatten_rows(Y);
    auto K = matmul(x, transpose(x));
    auto L = matmul(y, transpose(y));
    auto hkl = hsic_unbiased(K, L);
    auto hkk = hsic_unbiased(K, K);
    auto hll = hsic_unbiased(L, L);
    if (!(hkk.value().item() > T{0}) || !(hll.value().item() > T{0})) {
        throw SimilarityError("lincka: HSIC self-similarity is not positive (constant or collapsed representation)");
    }
    return div(hkl, sqrt(mul(hkk, hll)));
}

template <typename T>
Var<T> similarity(Metric m, const Var<T>& z, const Var<T>& zhat) {
    switch (m) {
        case Metric::L2Corr: return l2corr(z, zhat);
        case Metric::ExpVar: return expvar(z, zhat);
        case Metric::LinCKA: return lincka_batch(z, zhat);
    }
    throw std::invalid_argument("similarity: unknown metric");
}

template <typename T>
Tensor<double> gram(const Tensor<T>& X) {
    if (X.rank() < 2) throw ShapeError("gram: input needs rank >= 2");
    const int64_t n = X.extent(0);
    const int64_t p = static_cast<int64_t>(X.size()) / n;
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(X.ptr(), n, p);
    Tensor<double> K(Shape{n, n});
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> k(K.ptr(), n, n);
    const Eigen::MatrixXd xd = x.template cast<double>();
    k.noalias() = xd * xd.transpose();
    return K;
}

double hsic_unbiased_value(const Tensor<double>& K, const Tensor<double>& L) {
    const Shape& s = K.shape();
    if (s.size() != 2 || s[0] != s[1] || L.shape() != s) throw ShapeError("hsic: expected two n×n matrices");
    const int64_t n = s[0];
    if (n < 4) throw SimilarityError("hsic: needs at least 4 samples, got " + std::to_string(n));
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> k(K.ptr(), n, n);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> l(L.ptr(), n, n);
    Eigen::MatrixXd kt = k;
    Eigen::MatrixXd lt = l;
    kt.diagonal().setZero();
    lt.diagonal().setZero();
    const double nn = static_cast<double>(n);
    const double trace = kt.cwiseProduct(lt.transpose()).sum();
    const double sums = kt.sum() * lt.sum();
    const double cross = kt.colwise().sum().dot(lt.rowwise().sum().transpose());
    return (trace + sums / ((nn - 1) * (nn - 2)) - 2.0 / (nn - 2) * cross) / (nn * (nn - 3));
}

void CkaAccumulator::add_grams(const Tensor<double>& K, const Tensor<double>& L) {
    if (K.shape() != L.shape()) {
        throw SimilarityError("cka: batch sizes differ between streams (" + shape_str(K.shape()) + " vs " +
                              shape_str(L.shape()) + ")");
    }
    kl_ += hsic_unbiased_value(K, L);
    kk_ += hsic_unbiased_value(K, K);
    ll_ += hsic_unbiased_value(L, L);
    ++batches_;
}

double CkaAccumulator::value() const {
    if (batches_ == 0) throw SimilarityError("cka: no batches accumulated");
    if (!(kk_ > 0) || !(ll_ > 0)) {
        throw SimilarityError("cka: HSIC self-similarity is not positive (constant or collapsed representation)");
    }
    // The 1/k factors of the three batch means cancel.
    return kl_ / std::sqrt(kk_ * ll_);
}

template <typename T>
double lincka_dataset(std::span<const Tensor<T>> xs, std::span<const Tensor<T>> ys) {
    if (xs.size() != ys.size()) {
        throw SimilarityError("cka: streams have different lengths (" + std::to_string(xs.size()) + " vs " +
                              std::to_string(ys.size()) + " batches)");
    }
    CkaAccumulator acc;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].rank() < 1 || ys[i].rank() < 1 || xs[i].extent(0) != ys[i].extent(0)) {
            throw SimilarityError("cka: batch " + std::to_string(i) + " has mismatched sample counts");
        }
        acc.add(xs[i], ys[i]);
    }
    return acc.value();
}

Tensor<double> cka_heatmap(Model& a, Model& b, const Dataset& data, int64_t batch_size, std::span<const int> taps_a,
                           std::span<const int> taps_b) {
    if (taps_a.empty() || taps_b.empty()) throw std::invalid_argument("cka_heatmap: tap lists must be non-empty");
    const size_t na = taps_a.size(), nb = taps_b.size();
    std::vector<double> kl(na * nb, 0.0), kk(na, 0.0), ll(nb, 0.0);
    auto it = BatchIterator::test(data, batch_size);
    int batches = 0;
    while (auto batch = it.next()) {
        std::vector<Tensor<double>> ka, lb;
        {
            Tape<float> tape;
            auto out = a.forward(tape, batch->images, taps_a, Mode::Eval, false);
            for (int id : taps_a) ka.push_back(gram(out.taps.at(id).value()));
        }
        {
            Tape<float> tape;
            auto out = b.forward(tape, batch->images, taps_b, Mode::Eval, false);
            for (int id : taps_b) lb.push_back(gram(out.taps.at(id).value()));
        }
        for (size_t i = 0; i < na; ++i) kk[i] += hsic_unbiased_value(ka[i], ka[i]);
        for (size_t j = 0; j < nb; ++j) ll[j] += hsic_unbiased_value(lb[j], lb[j]);
        for (size_t i = 0; i < na; ++i)
            for (size_t j = 0; j < nb; ++j) kl[i * nb + j] += hsic_unbiased_value(ka[i], lb[j]);
        ++batches;
    }
    if (batches == 0) throw SimilarityError("cka_heatmap: no batches");
    Tensor<double> H(Shape{static_cast<int64_t>(na), static_cast<int64_t>(nb)});
    for (size_t i = 0; i < na; ++i) {
        for (size_t j = 0; j < nb; ++j) {
            if (!(kk[i] > 0) || !(ll[j] > 0)) {
                throw SimilarityError("cka_heatmap: collapsed representation at tap pair (" +
                                      std::to_string(taps_a[i]) + ", " + std::to_string(taps_b[j]) + ")");
            }
            H[i * nb + j] = kl[i * nb + j] / std::sqrt(kk[i] * ll[j]);
        }
    }
    return H;
}

#define DISSIM_INSTANTIATE_REPSIM(T)                                                           \
    template Var<T> channel_pearson<T>(const Var<T>&, const Var<T>&);                          \
    template Var<T> channel_r2<T>(const Var<T>&, const Var<T>&);                               \
    template Var<T> l2corr<T>(const Var<T>&, const Var<T>&);                                   \
    template Var<T> expvar<T>(const Var<T>&, const Var<T>&);                                   \
    template Var<T> hsic_unbiased<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> lincka_batch<T>(const Var<T>&, const Var<T>&);                             \
    template Var<T> similarity<T>(Metric, const Var<T>&, const Var<T>&);                       \
    template Tensor<double> gram<T>(const Tensor<T>&);                                         \
    template double lincka_dataset<T>(std::span<const Tensor<T>>, std::span<const Tensor<T>>);

DISSIM_INSTANTIATE_REPSIM(float)
DISSIM_INSTANTIATE_REPSIM(double)

}  // namespace dissim
