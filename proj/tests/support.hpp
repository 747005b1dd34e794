#pragma once

// Test-only helpers: random tensors, finite-difference gradient checking and
// naive reference implementations that stay independent of the library's
// optimized kernels.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <functional>
#include <random>
#include <vector>

#include "dissim/autodiff.hpp"

namespace dissim::testing {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("dissim_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline Tensor<double> randn(const Shape& shape, uint64_t seed, double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, stddev);
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

inline Tensor<double> rand_uniform(const Shape& shape, uint64_t seed, double lo, double hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ud(lo, hi);
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = ud(rng);
    return t;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-12),
/// maximized over inputs, with central differences of step h.
inline double gradient_relative_error(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& x : inputs) vars.push_back(tape.input(x));
        auto loss = f(tape, vars);
        auto grads = tape.backward(loss);
        for (const auto& v : vars) analytic.push_back(grads[v]);
    }
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& x : xs) vars.push_back(tape.constant(x));
        return f(tape, vars).value().item();
    };
    double worst = 0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        double diff2 = 0, a2 = 0, n2 = 0;
        for (size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double fp = eval(inputs);
            inputs[k][i] = orig - h;
            const double fm = eval(inputs);
            inputs[k][i] = orig;
            const double num = (fp - fm) / (2 * h);
            const double ana = analytic[k][i];
            diff2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            n2 += num * num;
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
        worst = std::max(worst, std::sqrt(diff2) / denom);
    }
    return worst;
}

inline Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<double> c(Shape{m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (int64_t t = 0; t < k; ++t) acc += a.at(i, t) * b.at(t, j);
            c.at(i, j) = acc;
        }
    return c;
}

inline Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
    const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int64_t O = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<double> y(Shape{B, O, Ho, Wo});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t oh = 0; oh < Ho; ++oh)
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = 0;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t ih = oh * stride - pad + i, iw = ow * stride - pad + j;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at(b, c, ih, iw) * w.at(o, c, i, j);
                            }
                    y.at(b, o, oh, ow) = acc;
                }
    return y;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dissim::testing
