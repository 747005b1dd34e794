#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dissim/tensor.hpp"

namespace dissim {

/// Raised when an operation on finite inputs produces a non-finite value.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Raised on misuse of a tape: backward twice, non-scalar loss, mixing tapes.
class TapeError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

/// A named trainable tensor that outlives any tape. `grad` is overwritten
/// (never accumulated) by each backward pass the parameter participates in.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
   public:
    Var() = default;
    Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    int64_t extent(int axis) const { return value().extent(axis); }
    bool requires_grad() const;
    Tape<T>* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

   private:
    Tape<T>* tape_ = nullptr;
    int id_ = -1;
};

/// Gradients of a scalar loss w.r.t. every requires_grad leaf of a tape.
template <typename T>
class Gradients {
   public:
    const Tensor<T>& operator[](const Var<T>& v) const {
        auto it = grads_.find(v.id());
        if (it == grads_.end()) throw TapeError("no gradient recorded for node " + std::to_string(v.id()));
        return it->second;
    }
    bool contains(const Var<T>& v) const { return grads_.contains(v.id()); }
    size_t size() const { return grads_.size(); }

   private:
    friend class Tape<T>;
    std::map<int, Tensor<T>> grads_;
};

/// Records differentiable operations in execution order for one step.
/// A tape is consumed by backward(): its node storage is released and any
/// further recording or a second backward() throws.
template <typename T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, nullptr); }

    Var<T> input(Tensor<T> value, bool requires_grad = true) {
        return push("input", std::move(value), requires_grad, {}, nullptr);
    }

    /// Registers a parameter as a leaf. Registering the same parameter twice
    /// returns the same handle.
    Var<T> param(Parameter<T>& p, bool requires_grad = true) {
        if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>(this, it->second);
        Var<T> v = push("param", p.value, requires_grad, {}, nullptr);
        nodes_[static_cast<size_t>(v.id())].param = &p;
        param_ids_.emplace(&p, v.id());
        return v;
    }

    /// Records the output of an operation. The node requires grad iff any
    /// parent does; backward functions of nodes that do not are never run.
    Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
        return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(fn));
    }

    Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
        bool rg = false;
        for (const auto& p : parents) {
            check_owner(p);
            rg = rg || nodes_[static_cast<size_t>(p.id())].requires_grad;
        }
        for (T x : value.data()) {
            if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
        }
        return push(op, std::move(value), rg, parents, rg ? std::move(fn) : nullptr);
    }

    /// Adds `g` into the gradient of `v` (no-op if `v` does not require grad).
    void accumulate(const Var<T>& v, Tensor<T> g) {
        Node& n = nodes_[static_cast<size_t>(v.id())];
        if (!n.requires_grad) return;
        if (g.shape() != n.value.shape()) {
            throw ShapeError(std::string("gradient shape ") + shape_str(g.shape()) + " does not match " +
                             shape_str(n.value.shape()) + " of " + n.op);
        }
        if (!n.has_grad) {
            n.grad = std::move(g);
            n.has_grad = true;
            return;
        }
        auto dst = n.grad.data();
        auto src = g.data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    Gradients<T> backward(const Var<T>& loss) {
        check_owner(loss);
        if (consumed_ || in_backward_) throw TapeError("tape already consumed by a previous backward()");
        Node& root = nodes_[static_cast<size_t>(loss.id())];
        if (root.value.size() != 1) throw TapeError("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
        if (!root.requires_grad) throw TapeError("loss is detached from every requires_grad leaf");
        in_backward_ = true;

        root.grad = Tensor<T>(root.value.shape(), T{1});
        root.has_grad = true;
        backward_order_.clear();

        Gradients<T> out;
        for (int id = loss.id(); id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad) continue;
            backward_order_.push_back(id);
            if (!n.has_grad) n.grad = Tensor<T>(n.value.shape());
            if (n.backward) {
                n.backward(*this, n.grad);
                n.backward = nullptr;
                n.value = Tensor<T>();
                n.grad = Tensor<T>();
            } else {
                // leaf
                if (n.param != nullptr) n.param->grad = n.grad;
                out.grads_.emplace(id, std::move(n.grad));
            }
        }
        // Leaves recorded after the loss cannot reach it; their gradient is zero.
        for (size_t id = static_cast<size_t>(loss.id()) + 1; id < nodes_.size(); ++id) {
            Node& n = nodes_[id];
            if (n.param != nullptr && n.requires_grad) n.param->grad = Tensor<T>(n.value.shape());
        }
        consumed_ = true;
        nodes_.clear();
        nodes_.shrink_to_fit();
        param_ids_.clear();
        return out;
    }

    const Tensor<T>& value_of(int id) const {
        if (consumed_) throw TapeError("tape consumed");
        return nodes_.at(static_cast<size_t>(id)).value;
    }
    bool requires_grad_of(int id) const { return nodes_.at(static_cast<size_t>(id)).requires_grad; }

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Node ids visited by the last backward(), in visit order.
    const std::vector<int>& backward_order() const { return backward_order_; }

   private:
    struct Node {
        const char* op = "";
        Tensor<T> value;
        Tensor<T> grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    void check_owner(const Var<T>& v) const {
        if (v.tape() != this) throw TapeError("variable belongs to a different tape");
        if (v.id() < 0 || static_cast<size_t>(v.id()) >= nodes_.size()) throw TapeError("dangling variable");
    }

    Var<T> push(const char* op, Tensor<T> value, bool requires_grad, const std::vector<Var<T>>& /*parents*/,
                BackwardFn fn) {
        if (consumed_ || in_backward_) throw TapeError("cannot record on a consumed tape");
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
    }

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter<T>*, int> param_ids_;
    std::vector<int> backward_order_;
    bool consumed_ = false;
    bool in_backward_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    if (tape_ == nullptr) throw TapeError("empty variable");
    return tape_->value_of(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_ != nullptr && tape_->requires_grad_of(id_);
}

// ---------------------------------------------------------------------------
// Differentiable primitives. Binary elementwise ops broadcast when both
// operands have the same rank and each extent pair is equal or contains a 1,
// or when either operand holds a single element.
// ---------------------------------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> pow(const Var<T>& a, T exponent);
template <typename T> Var<T> sqrt(const Var<T>& a);
template <typename T> Var<T> celu(const Var<T>& a, T alpha = T{1});

/// Sum over `axes` (all axes when empty). Reduced axes are kept with extent 1
/// if `keepdims`, dropped otherwise.
template <typename T> Var<T> sum(const Var<T>& a, std::vector<int> axes = {}, bool keepdims = false);
template <typename T> Var<T> mean(const Var<T>& a, std::vector<int> axes = {}, bool keepdims = false);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> permute(const Var<T>& a, std::vector<int> order);
template <typename T> Var<T> transpose(const Var<T>& a);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]; zero padding.
template <typename T> Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, int stride, int padding);

template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_channels(const Var<T>& a, int64_t begin, int64_t end);

/// Non-overlapping k×k average pooling of [B,C,H,W]; H and W must divide by k.
template <typename T> Var<T> avg_pool2d(const Var<T>& a, int k);

/// Running statistics for batch normalization; not trainable.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNormState() = default;
    explicit BatchNormState(int64_t channels)
        : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Per-channel batch normalization of [B,C,H,W] with affine gamma/beta of
/// shape [C]. Training mode normalizes with biased batch statistics and
/// updates the running estimates (unbiased variance); eval mode uses them.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, bool training);

/// Mean softmax cross-entropy of logits [B,K] against integer labels.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

template <typename T> Var<T> detach(const Var<T>& a);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

// Plain (tape-free) helpers shared by ops and callers.
template <typename T> Tensor<T> matmul_values(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> conv2d_values(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int padding);

}  // namespace dissim
