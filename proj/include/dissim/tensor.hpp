#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dissim {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major array. Rank 0 (empty shape) holds a single scalar.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() : data_(1, T{0}) {}

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        std::vector<T> flat;
        int64_t cols = -1;
        for (const auto& r : rows) {
            if (cols >= 0 && static_cast<int64_t>(r.size()) != cols) {
                throw ShapeError("ragged rows");
            }
            cols = static_cast<int64_t>(r.size());
            flat.insert(flat.end(), r.begin(), r.end());
        }
        return Tensor(Shape{static_cast<int64_t>(rows.size()), cols}, std::move(flat));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    size_t size() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }

    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    // Element access by multi-index; slow, meant for tests and small tensors.
    template <typename... Idx>
    T& at(Idx... idx) {
        return data_[offset({static_cast<int64_t>(idx)...})];
    }
    template <typename... Idx>
    const T& at(Idx... idx) const {
        return data_[offset({static_cast<int64_t>(idx)...})];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != shape_numel(shape_)) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Tensor& other) const = default;

   private:
    void check_extents() const {
        for (int64_t e : shape_) {
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape_));
        }
    }

    size_t offset(std::initializer_list<int64_t> idx) const {
        if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
        size_t off = 0;
        size_t axis = 0;
        for (int64_t i : idx) {
            if (i < 0 || i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
            off = off * static_cast<size_t>(shape_[axis]) + static_cast<size_t>(i);
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace dissim
