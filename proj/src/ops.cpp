#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dissim/autodiff.hpp"

namespace dissim {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

std::vector<int64_t> contiguous_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `s` when read as broadcast into `out` (same rank, or a single
// element).
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    if (shape_numel(s) == 1) return st;
    auto cs = contiguous_strides(s);
    for (size_t ax = 0; ax < out.size(); ++ax) st[ax] = (s[ax] == 1 && out[ax] != 1) ? 0 : cs[ax];
    return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return a;
    if (shape_numel(b) == 1 && b.size() <= a.size()) return a;
    if (shape_numel(a) == 1 && a.size() <= b.size()) return b;
    if (a.size() != b.size()) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
    }
    return out;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void for_each_index(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, F&& f) {
    const int r = static_cast<int>(out.size());
    if (r == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    const int64_t n = shape_numel(out);
    const int64_t inner = out[r - 1];
    const int64_t ea = sa[r - 1];
    const int64_t eb = sb[r - 1];
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t ia = 0;
    int64_t ib = 0;
    for (int64_t i = 0; i < n; i += inner) {
        for (int64_t k = 0; k < inner; ++k) f(i + k, ia + k * ea, ib + k * eb);
        for (int ax = r - 2; ax >= 0; --ax) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out[ax]) break;
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

template <typename T, typename F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F f) {
    Tensor<T> out(out_shape);
    T* o = out.ptr();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    const size_t n = out.size();
    if (a.shape() == out_shape && b.shape() == out_shape) {
        for (size_t i = 0; i < n; ++i) o[i] = f(pa[i], pb[i]);
    } else if (a.shape() == out_shape && b.size() == 1) {
        const T y = pb[0];
        for (size_t i = 0; i < n; ++i) o[i] = f(pa[i], y);
    } else if (b.shape() == out_shape && a.size() == 1) {
        const T x = pa[0];
        for (size_t i = 0; i < n; ++i) o[i] = f(x, pb[i]);
    } else {
        for_each_index(out_shape, broadcast_strides(a.shape(), out_shape), broadcast_strides(b.shape(), out_shape),
                       [&](int64_t i, int64_t ia, int64_t ib) { o[i] = f(pa[ia], pb[ib]); });
    }
    return out;
}

// Sums `g` (shaped like a broadcast result) down to `target`.
template <typename T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor<T> out(target);
    if (out.size() == 1) {
        double acc = 0;
        for (T v : g.data()) acc += v;
        out[0] = static_cast<T>(acc);
        return out;
    }
    if (target.size() != g.shape().size()) {
        throw ShapeError("sum_to: rank mismatch " + shape_str(g.shape()) + " -> " + shape_str(target));
    }
    std::vector<double> acc(out.size(), 0.0);
    const T* pg = g.ptr();
    auto st = broadcast_strides(target, g.shape());
    std::vector<int64_t> zero(g.shape().size(), 0);
    for_each_index(g.shape(), st, zero, [&](int64_t i, int64_t it, int64_t) { acc[it] += pg[i]; });
    for (size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
    return out;
}

template <typename T>
Tensor<T> expand_to(const Tensor<T>& g, const Shape& target) {
    Tensor<T> zero = Tensor<T>::scalar(T{0});
    return broadcast_apply(g, zero, target, [](T x, T) { return x; });
}

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, const char* name, F f, DF df) {
    const Tensor<T>& x = a.value();
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return a.tape()->record(name, std::move(y), {a}, [a, df](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& xv = a.value();
        Tensor<T> ga(xv.shape());
        for (size_t i = 0; i < xv.size(); ++i) ga[i] = g[i] * df(xv[i]);
        tape.accumulate(a, std::move(ga));
    });
}

void check_same_tape(const void* a, const void* b) {
    if (a != b) throw TapeError("operands recorded on different tapes");
}

std::vector<int> normalize_axes(std::vector<int> axes, int rank) {
    if (axes.empty()) {
        axes.resize(static_cast<size_t>(rank));
        std::iota(axes.begin(), axes.end(), 0);
    }
    for (int& ax : axes) {
        if (ax < 0) ax += rank;
        if (ax < 0 || ax >= rank) throw ShapeError("reduction axis out of range");
    }
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    return axes;
}

int conv_out_extent(int64_t in, int64_t k, int stride, int pad) {
    const int64_t span = in + 2 * pad - k;
    if (span < 0 || stride <= 0) return 0;
    return static_cast<int>(span / stride + 1);
}

// col[K, B*P] with K = C*kh*kw, P = Ho*Wo.
template <typename T>
void im2col(const T* x, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* col) {
    const int64_t P = Ho * Wo;
    const int64_t N = B * P;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                T* row = col + ((c * kh + i) * kw + j) * N;
                for (int64_t b = 0; b < B; ++b) {
                    const T* plane = x + (b * C + c) * H * W;
                    T* dst = row + b * P;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        const int64_t ih = oh * stride - pad + i;
                        T* d = dst + oh * Wo;
                        if (ih < 0 || ih >= H) {
                            std::fill(d, d + Wo, T{0});
                            continue;
                        }
                        const T* src = plane + ih * W;
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const int64_t iw = ow * stride - pad + j;
                            d[ow] = (iw >= 0 && iw < W) ? src[iw] : T{0};
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int stride,
                int pad, int64_t Ho, int64_t Wo, T* dx) {
    const int64_t P = Ho * Wo;
    const int64_t N = B * P;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                const T* row = col + ((c * kh + i) * kw + j) * N;
                for (int64_t b = 0; b < B; ++b) {
                    T* plane = dx + (b * C + c) * H * W;
                    const T* src = row + b * P;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        const int64_t ih = oh * stride - pad + i;
                        if (ih < 0 || ih >= H) continue;
                        T* d = plane + ih * W;
                        const T* s = src + oh * Wo;
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const int64_t iw = ow * stride - pad + j;
                            if (iw >= 0 && iw < W) d[iw] += s[ow];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    int64_t B, C, H, W, O, kh, kw, Ho, Wo;
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects rank-4 input and kernel");
    if (x.extent(1) != w.extent(1)) {
        throw ShapeError("conv2d: input channels " + std::to_string(x.extent(1)) + " vs kernel " +
                         shape_str(w.shape()));
    }
    if (stride <= 0 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
    ConvGeom gm{x.extent(0), x.extent(1), x.extent(2), x.extent(3), w.extent(0), w.extent(2), w.extent(3), 0, 0};
    gm.Ho = conv_out_extent(gm.H, gm.kh, stride, padding);
    gm.Wo = conv_out_extent(gm.W, gm.kw, stride, padding);
    if (gm.Ho <= 0 || gm.Wo <= 0) {
        throw ShapeError("conv2d: non-positive output extent for input " + shape_str(x.shape()) + " kernel " +
                         shape_str(w.shape()));
    }
    return gm;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_tape(a.tape(), b.tape());
    Shape out = broadcast_shape(a.shape(), b.shape(), "add");
    Tensor<T> y = broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x + z; });
    return a.tape()->record("add", std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
        if (a.requires_grad()) tape.accumulate(a, sum_to(g, a.shape()));
        if (b.requires_grad()) tape.accumulate(b, sum_to(g, b.shape()));
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_tape(a.tape(), b.tape());
    Shape out = broadcast_shape(a.shape(), b.shape(), "sub");
    Tensor<T> y = broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x - z; });
    return a.tape()->record("sub", std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
        if (a.requires_grad()) tape.accumulate(a, sum_to(g, a.shape()));
        if (b.requires_grad()) {
            Tensor<T> gb = sum_to(g, b.shape());
            for (auto& v : gb.data()) v = -v;
            tape.accumulate(b, std::move(gb));
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_tape(a.tape(), b.tape());
    Shape out = broadcast_shape(a.shape(), b.shape(), "mul");
    Tensor<T> y = broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x * z; });
    return a.tape()->record("mul", std::move(y), {a, b}, [a, b, out](Tape<T>& tape, const Tensor<T>& g) {
        auto times = [](T x, T z) { return x * z; };
        if (a.requires_grad()) tape.accumulate(a, sum_to(broadcast_apply(g, b.value(), out, times), a.shape()));
        if (b.requires_grad()) tape.accumulate(b, sum_to(broadcast_apply(g, a.value(), out, times), b.shape()));
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same_tape(a.tape(), b.tape());
    Shape out = broadcast_shape(a.shape(), b.shape(), "div");
    Tensor<T> y = broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x / z; });
    return a.tape()->record("div", std::move(y), {a, b}, [a, b, out](Tape<T>& tape, const Tensor<T>& g) {
        if (a.requires_grad()) {
            tape.accumulate(a, sum_to(broadcast_apply(g, b.value(), out, [](T x, T z) { return x / z; }), a.shape()));
        }
        if (b.requires_grad()) {
            Tensor<T> t = broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return -x / (z * z); });
            for (size_t i = 0; i < t.size(); ++i) t[i] *= g[i];
            tape.accumulate(b, sum_to(t, b.shape()));
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    return unary(a, "scale", [s](T x) { return x * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    return unary(a, "add_scalar", [s](T x) { return x + s; }, [](T) { return T{1}; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
    return unary(a, "exp", [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    return unary(a, "relu", [](T x) { return x > T{0} ? x : T{0}; }, [](T x) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> pow(const Var<T>& a, T exponent) {
    return unary(
        a, "pow", [exponent](T x) { return std::pow(x, exponent); },
        [exponent](T x) { return exponent * std::pow(x, exponent - T{1}); });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
    return unary(a, "sqrt", [](T x) { return std::sqrt(x); }, [](T x) { return T(0.5) / std::sqrt(x); });
}

template <typename T>
Var<T> celu(const Var<T>& a, T alpha) {
    if (!(alpha > T{0})) throw std::invalid_argument("celu: alpha must be positive");
    return unary(
        a, "celu", [alpha](T x) { return x > T{0} ? x : alpha * std::expm1(x / alpha); },
        [alpha](T x) { return x > T{0} ? T{1} : std::exp(x / alpha); });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a, std::vector<int> axes, bool keepdims) {
    const Shape in = a.shape();
    axes = normalize_axes(std::move(axes), static_cast<int>(in.size()));
    Shape kept = in;
    Shape dropped;
    for (size_t ax = 0; ax < in.size(); ++ax) {
        if (std::binary_search(axes.begin(), axes.end(), static_cast<int>(ax))) {
            kept[ax] = 1;
        } else {
            dropped.push_back(in[ax]);
        }
    }
    Tensor<T> y = sum_to(a.value(), kept);
    if (!keepdims) y = y.reshaped(dropped);
    return a.tape()->record("sum", std::move(y), {a}, [a, kept](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(a, expand_to(g.reshaped(kept), a.shape()));
    });
}

template <typename T>
Var<T> mean(const Var<T>& a, std::vector<int> axes, bool keepdims) {
    const Shape in = a.shape();
    auto norm = normalize_axes(axes, static_cast<int>(in.size()));
    int64_t count = 1;
    for (int ax : norm) count *= in[static_cast<size_t>(ax)];
    return scale(sum(a, std::move(norm), keepdims), T{1} / static_cast<T>(count));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> y = a.value().reshaped(std::move(shape));
    return a.tape()->record("reshape", std::move(y), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(a, g.reshaped(a.shape()));
    });
}

namespace {
template <typename T>
Tensor<T> permute_values(const Tensor<T>& x, const std::vector<int>& order) {
    const Shape& in = x.shape();
    if (order.size() != in.size()) throw ShapeError("permute: order rank mismatch");
    std::vector<bool> seen(in.size(), false);
    Shape out(in.size());
    auto cs = contiguous_strides(in);
    std::vector<int64_t> sa(in.size());
    for (size_t ax = 0; ax < order.size(); ++ax) {
        const int src = order[ax];
        if (src < 0 || src >= static_cast<int>(in.size()) || seen[static_cast<size_t>(src)]) {
            throw ShapeError("permute: invalid axis order");
        }
        seen[static_cast<size_t>(src)] = true;
        out[ax] = in[static_cast<size_t>(src)];
        sa[ax] = cs[static_cast<size_t>(src)];
    }
    Tensor<T> y(out);
    std::vector<int64_t> zero(in.size(), 0);
    const T* px = x.ptr();
    T* py = y.ptr();
    for_each_index(out, sa, zero, [&](int64_t i, int64_t ia, int64_t) { py[i] = px[ia]; });
    return y;
}
}  // namespace

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<int> order) {
    Tensor<T> y = permute_values(a.value(), order);
    std::vector<int> inverse(order.size());
    for (size_t i = 0; i < order.size(); ++i) inverse[static_cast<size_t>(order[i])] = static_cast<int>(i);
    return a.tape()->record("permute", std::move(y), {a}, [a, inverse](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(a, permute_values(g, inverse));
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix");
    return permute(a, {1, 0});
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul_values(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<T> c(Shape{m, n});
    MapMat<T>(c.ptr(), m, n).noalias() = CMapMat<T>(a.ptr(), m, k) * CMapMat<T>(b.ptr(), k, n);
    return c;
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    check_same_tape(a.tape(), b.tape());
    Tensor<T> y = matmul_values(a.value(), b.value());
    return a.tape()->record("matmul", std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
        const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
        if (a.requires_grad()) {
            Tensor<T> ga(Shape{m, k});
            MapMat<T>(ga.ptr(), m, k).noalias() =
                CMapMat<T>(g.ptr(), m, n) * CMapMat<T>(b.value().ptr(), k, n).transpose();
            tape.accumulate(a, std::move(ga));
        }
        if (b.requires_grad()) {
            Tensor<T> gb(Shape{k, n});
            MapMat<T>(gb.ptr(), k, n).noalias() =
                CMapMat<T>(a.value().ptr(), m, k).transpose() * CMapMat<T>(g.ptr(), m, n);
            tape.accumulate(b, std::move(gb));
        }
    });
}

template <typename T>
Tensor<T> conv2d_values(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
    const ConvGeom gm = conv_geometry(x, w, stride, padding);
    const int64_t K = gm.C * gm.kh * gm.kw;
    const int64_t P = gm.Ho * gm.Wo;
    const int64_t N = gm.B * P;
    std::vector<T> col(static_cast<size_t>(K * N));
    im2col(x.ptr(), gm.B, gm.C, gm.H, gm.W, gm.kh, gm.kw, stride, padding, gm.Ho, gm.Wo, col.data());
    RowMat<T> out = CMapMat<T>(w.ptr(), gm.O, K) * CMapMat<T>(col.data(), K, N);
    Tensor<T> y(Shape{gm.B, gm.O, gm.Ho, gm.Wo});
    for (int64_t b = 0; b < gm.B; ++b) {
        for (int64_t o = 0; o < gm.O; ++o) {
            const T* src = out.data() + o * N + b * P;
            std::copy(src, src + P, y.ptr() + (b * gm.O + o) * P);
        }
    }
    return y;
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, int stride, int padding) {
    check_same_tape(input.tape(), kernel.tape());
    Tensor<T> y = conv2d_values(input.value(), kernel.value(), stride, padding);
    return input.tape()->record(
        "conv2d", std::move(y), {input, kernel}, [input, kernel, stride, padding](Tape<T>& tape, const Tensor<T>& g) {
            const Tensor<T>& x = input.value();
            const Tensor<T>& w = kernel.value();
            const ConvGeom gm = conv_geometry(x, w, stride, padding);
            const int64_t K = gm.C * gm.kh * gm.kw;
            const int64_t P = gm.Ho * gm.Wo;
            const int64_t N = gm.B * P;
            // g [B,O,P] -> gm [O, B*P]
            RowMat<T> gmat(gm.O, N);
            for (int64_t b = 0; b < gm.B; ++b) {
                for (int64_t o = 0; o < gm.O; ++o) {
                    const T* src = g.ptr() + (b * gm.O + o) * P;
                    std::copy(src, src + P, gmat.data() + o * N + b * P);
                }
            }
            if (kernel.requires_grad()) {
                std::vector<T> col(static_cast<size_t>(K * N));
                im2col(x.ptr(), gm.B, gm.C, gm.H, gm.W, gm.kh, gm.kw, stride, padding, gm.Ho, gm.Wo, col.data());
                Tensor<T> gw(w.shape());
                MapMat<T>(gw.ptr(), gm.O, K).noalias() = gmat * CMapMat<T>(col.data(), K, N).transpose();
                tape.accumulate(kernel, std::move(gw));
            }
            if (input.requires_grad()) {
                RowMat<T> dcol = CMapMat<T>(w.ptr(), gm.O, K).transpose() * gmat;
                Tensor<T> gx(x.shape());
                col2im_add(dcol.data(), gm.B, gm.C, gm.H, gm.W, gm.kh, gm.kw, stride, padding, gm.Ho, gm.Wo,
                           gx.ptr());
                tape.accumulate(input, std::move(gx));
            }
        });
}

// ---------------------------------------------------------------------------
// Channel concat / slice, pooling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no operands");
    const Shape& first = parts.front().shape();
    if (first.size() < 2) throw ShapeError("concat_channels: rank < 2");
    int64_t total = 0;
    for (const auto& p : parts) {
        check_same_tape(parts.front().tape(), p.tape());
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat_channels: rank mismatch");
        for (size_t ax = 0; ax < s.size(); ++ax) {
            if (ax != 1 && s[ax] != first[ax]) {
                throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(first));
            }
        }
        total += s[1];
    }
    const int64_t outer = first[0];
    const int64_t inner = shape_numel(first) / (first[0] * first[1]);
    Shape out_shape = first;
    out_shape[1] = total;
    Tensor<T> y(out_shape);
    int64_t offset = 0;
    for (const auto& p : parts) {
        const int64_t c = p.shape()[1];
        const T* src = p.value().ptr();
        for (int64_t b = 0; b < outer; ++b) {
            std::copy(src + b * c * inner, src + (b + 1) * c * inner, y.ptr() + (b * total + offset) * inner);
        }
        offset += c;
    }
    return parts.front().tape()->record(
        "concat_channels", std::move(y), parts, [parts, outer, inner, total](Tape<T>& tape, const Tensor<T>& g) {
            int64_t off = 0;
            for (const auto& p : parts) {
                const int64_t c = p.shape()[1];
                if (p.requires_grad()) {
                    Tensor<T> gp(p.shape());
                    for (int64_t b = 0; b < outer; ++b) {
                        const T* src = g.ptr() + (b * total + off) * inner;
                        std::copy(src, src + c * inner, gp.ptr() + b * c * inner);
                    }
                    tape.accumulate(p, std::move(gp));
                }
                off += c;
            }
        });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, int64_t begin, int64_t end) {
    const Shape& s = a.shape();
    if (s.size() < 2 || begin < 0 || end > s[1] || begin >= end) throw ShapeError("slice_channels: bad range");
    const int64_t outer = s[0];
    const int64_t total = s[1];
    const int64_t inner = shape_numel(s) / (s[0] * s[1]);
    const int64_t c = end - begin;
    Shape out_shape = s;
    out_shape[1] = c;
    Tensor<T> y(out_shape);
    for (int64_t b = 0; b < outer; ++b) {
        const T* src = a.value().ptr() + (b * total + begin) * inner;
        std::copy(src, src + c * inner, y.ptr() + b * c * inner);
    }
    return a.tape()->record("slice_channels", std::move(y), {a},
                            [a, outer, total, inner, begin, c](Tape<T>& tape, const Tensor<T>& g) {
                                Tensor<T> ga(a.shape());
                                for (int64_t b = 0; b < outer; ++b) {
                                    std::copy(g.ptr() + b * c * inner, g.ptr() + (b + 1) * c * inner,
                                              ga.ptr() + (b * total + begin) * inner);
                                }
                                tape.accumulate(a, std::move(ga));
                            });
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& a, int k) {
    const Shape& s = a.shape();
    if (s.size() != 4 || k <= 0 || s[2] % k != 0 || s[3] % k != 0) {
        throw ShapeError("avg_pool2d: extents of " + shape_str(s) + " not divisible by " + std::to_string(k));
    }
    const int64_t planes = s[0] * s[1], H = s[2], W = s[3], Ho = H / k, Wo = W / k;
    const T inv = T{1} / static_cast<T>(k * k);
    Tensor<T> y(Shape{s[0], s[1], Ho, Wo});
    const T* x = a.value().ptr();
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                T acc{0};
                for (int64_t i = 0; i < k; ++i) {
                    for (int64_t j = 0; j < k; ++j) acc += x[(p * H + oh * k + i) * W + ow * k + j];
                }
                y.ptr()[(p * Ho + oh) * Wo + ow] = acc * inv;
            }
        }
    }
    return a.tape()->record("avg_pool2d", std::move(y), {a},
                            [a, planes, H, W, Ho, Wo, k, inv](Tape<T>& tape, const Tensor<T>& g) {
                                Tensor<T> ga(a.shape());
                                for (int64_t p = 0; p < planes; ++p) {
                                    for (int64_t oh = 0; oh < Ho; ++oh) {
                                        for (int64_t ow = 0; ow < Wo; ++ow) {
                                            const T v = g.ptr()[(p * Ho + oh) * Wo + ow] * inv;
                                            for (int64_t i = 0; i < k; ++i) {
                                                for (int64_t j = 0; j < k; ++j) {
                                                    ga.ptr()[(p * H + oh * k + i) * W + ow * k + j] = v;
                                                }
                                            }
                                        }
                                    }
                                }
                                tape.accumulate(a, std::move(ga));
                            });
}

// ---------------------------------------------------------------------------
// Batch normalization and loss
// ---------------------------------------------------------------------------

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                  bool training) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("batch_norm expects [B,C,H,W]");
    const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    const int64_t n = B * HW;
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) throw ShapeError("batch_norm: affine shape mismatch");
    const T* px = x.value().ptr();

    std::vector<T> mu(static_cast<size_t>(C));
    std::vector<T> invstd(static_cast<size_t>(C));
    if (training) {
        if (n < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
        for (int64_t c = 0; c < C; ++c) {
            double m = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = px + (b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) m += p[i];
            }
            m /= static_cast<double>(n);
            double v = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = px + (b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const double d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(n);
            mu[c] = static_cast<T>(m);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(state.eps)));
            const T unbiased = static_cast<T>(v * static_cast<double>(n) / static_cast<double>(n - 1));
            state.running_mean[c] = (T{1} - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
            state.running_var[c] = (T{1} - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mu[c] = state.running_mean[c];
            invstd[c] = T{1} / std::sqrt(state.running_var[c] + state.eps);
        }
    }

    const T* pg = gamma.value().ptr();
    const T* pb = beta.value().ptr();
    Tensor<T> y(s);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = px + (b * C + c) * HW;
            T* q = y.ptr() + (b * C + c) * HW;
            const T a = pg[c] * invstd[c];
            const T shift = pb[c] - a * mu[c];
            for (int64_t i = 0; i < HW; ++i) q[i] = a * p[i] + shift;
        }
    }

    return x.tape()->record(
        "batch_norm", std::move(y), {x, gamma, beta},
        [x, gamma, beta, mu, invstd, training, B, C, HW, n](Tape<T>& tape, const Tensor<T>& g) {
            const T* xv = x.value().ptr();
            const T* gv = g.ptr();
            Tensor<T> ggamma(Shape{C});
            Tensor<T> gbeta(Shape{C});
            std::vector<double> sum_g(static_cast<size_t>(C), 0.0);
            std::vector<double> sum_gx(static_cast<size_t>(C), 0.0);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    const T* p = xv + (b * C + c) * HW;
                    const T* q = gv + (b * C + c) * HW;
                    double sg = 0, sgx = 0;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double xhat = (static_cast<double>(p[i]) - mu[c]) * invstd[c];
                        sg += q[i];
                        sgx += q[i] * xhat;
                    }
                    sum_g[c] += sg;
                    sum_gx[c] += sgx;
                }
            }
            for (int64_t c = 0; c < C; ++c) {
                ggamma[c] = static_cast<T>(sum_gx[c]);
                gbeta[c] = static_cast<T>(sum_g[c]);
            }
            if (x.requires_grad()) {
                const T* gm = gamma.value().ptr();
                Tensor<T> gx(x.shape());
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                        const T* p = xv + (b * C + c) * HW;
                        const T* q = gv + (b * C + c) * HW;
                        T* r = gx.ptr() + (b * C + c) * HW;
                        if (training) {
                            const double k = static_cast<double>(gm[c]) * invstd[c] / static_cast<double>(n);
                            const double mg = sum_g[c];
                            const double mgx = sum_gx[c];
                            for (int64_t i = 0; i < HW; ++i) {
                                const double xhat = (static_cast<double>(p[i]) - mu[c]) * invstd[c];
                                r[i] = static_cast<T>(k * (static_cast<double>(n) * q[i] - mg - xhat * mgx));
                            }
                        } else {
                            const T k = gm[c] * invstd[c];
                            for (int64_t i = 0; i < HW; ++i) r[i] = q[i] * k;
                        }
                    }
                }
                tape.accumulate(x, std::move(gx));
            }
            tape.accumulate(gamma, std::move(ggamma));
            tape.accumulate(beta, std::move(gbeta));
        });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != static_cast<int64_t>(labels.size())) {
        throw ShapeError("cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
    }
    const int64_t B = s[0], K = s[1];
    const T* z = logits.value().ptr();
    std::vector<T> probs(static_cast<size_t>(B * K));
    double total = 0;
    for (int64_t b = 0; b < B; ++b) {
        const int y = labels[static_cast<size_t>(b)];
        if (y < 0 || y >= K) throw std::out_of_range("cross_entropy: label out of range");
        const T* row = z + b * K;
        const double mx = *std::max_element(row, row + K);
        double se = 0;
        for (int64_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k]) - mx);
        const double lse = mx + std::log(se);
        total += lse - row[y];
        for (int64_t k = 0; k < K; ++k) probs[b * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k]) - lse));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B)));
    return logits.tape()->record("cross_entropy", std::move(y), {logits},
                                 [logits, probs = std::move(probs), lab, B, K](Tape<T>& tape, const Tensor<T>& g) {
                                     const T scale_ = g[0] / static_cast<T>(B);
                                     Tensor<T> gl(logits.shape());
                                     for (int64_t b = 0; b < B; ++b) {
                                         for (int64_t k = 0; k < K; ++k) {
                                             T v = probs[b * K + k];
                                             if (k == lab[static_cast<size_t>(b)]) v -= T{1};
                                             gl[b * K + k] = v * scale_;
                                         }
                                     }
                                     tape.accumulate(logits, std::move(gl));
                                 });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
    return a.tape()->constant(a.value());
}

#define DISSIM_INSTANTIATE_OPS(T)                                                                    \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> div<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> scale<T>(const Var<T>&, T);                                                      \
    template Var<T> add_scalar<T>(const Var<T>&, T);                                                 \
    template Var<T> exp<T>(const Var<T>&);                                                           \
    template Var<T> relu<T>(const Var<T>&);                                                          \
    template Var<T> pow<T>(const Var<T>&, T);                                                        \
    template Var<T> sqrt<T>(const Var<T>&);                                                          \
    template Var<T> celu<T>(const Var<T>&, T);                                                       \
    template Var<T> sum<T>(const Var<T>&, std::vector<int>, bool);                                   \
    template Var<T> mean<T>(const Var<T>&, std::vector<int>, bool);                                  \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                \
    template Var<T> permute<T>(const Var<T>&, std::vector<int>);                                     \
    template Var<T> transpose<T>(const Var<T>&);                                                     \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                        \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, int, int);                               \
    template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                  \
    template Var<T> slice_channels<T>(const Var<T>&, int64_t, int64_t);                              \
    template Var<T> avg_pool2d<T>(const Var<T>&, int);                                               \
    template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool); \
    template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);                          \
    template Var<T> detach<T>(const Var<T>&);                                                        \
    template Tensor<T> matmul_values<T>(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> conv2d_values<T>(const Tensor<T>&, const Tensor<T>&, int, int);

DISSIM_INSTANTIATE_OPS(float)
DISSIM_INSTANTIATE_OPS(double)

}  // namespace dissim
