#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "dissim/autodiff.hpp"

namespace dissim {

struct SgdOptions {
    double lr = 0.1;
    double momentum = 0.0;
    bool nesterov = false;
    double weight_decay = 0.0;
};

/// SGD with optional (Nesterov) momentum and L2 weight decay folded into the
/// gradient:
///   d = g + wd·p;  v = μ·v + d;  d = nesterov ? d + μ·v : v;  p -= lr·d
/// Momentum buffers start at zero and are owned by the caller.
template <typename T>
class Sgd {
   public:
    explicit Sgd(SgdOptions opts = {}) : opts_(opts) {}

    const SgdOptions& options() const { return opts_; }

    /// Applies one update using each parameter's `grad`; `lr` overrides the
    /// configured learning rate (schedules pass the current value).
    void step(std::span<Parameter<T>* const> params, double lr) {
        if (buffers_.empty() && opts_.momentum != 0.0) {
            for (auto* p : params) buffers_.emplace_back(p->value.shape());
        }
        if (opts_.momentum != 0.0 && buffers_.size() != params.size()) {
            throw ShapeError("sgd: parameter list changed between steps");
        }
        const T rate = static_cast<T>(lr);
        const T mu = static_cast<T>(opts_.momentum);
        const T wd = static_cast<T>(opts_.weight_decay);
        for (size_t k = 0; k < params.size(); ++k) {
            Parameter<T>& p = *params[k];
            if (p.grad.shape() != p.value.shape()) {
                throw ShapeError("sgd: gradient shape " + shape_str(p.grad.shape()) + " does not match parameter " +
                                 p.name);
            }
            T* w = p.value.ptr();
            const T* g = p.grad.ptr();
            const size_t n = p.value.size();
            if (opts_.momentum == 0.0) {
                for (size_t i = 0; i < n; ++i) w[i] -= rate * (g[i] + wd * w[i]);
                continue;
            }
            T* v = buffers_[k].ptr();
            if (buffers_[k].shape() != p.value.shape()) throw ShapeError("sgd: momentum buffer shape mismatch");
            for (size_t i = 0; i < n; ++i) {
                T d = g[i] + wd * w[i];
                v[i] = mu * v[i] + d;
                d = opts_.nesterov ? d + mu * v[i] : v[i];
                w[i] -= rate * d;
            }
        }
    }

    void step(std::span<Parameter<T>* const> params) { step(params, opts_.lr); }

   private:
    SgdOptions opts_;
    std::vector<Tensor<T>> buffers_;
};

/// base_lr·(1 + cos(π·step/total_steps))/2
inline double cosine_lr(int64_t step, int64_t total_steps, double base_lr) {
    if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) throw std::out_of_range("cosine_lr: step outside [0, total_steps]");
    return base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))) /
           2.0;
}

}  // namespace dissim
