#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "upscale/error.hpp"

namespace upscale {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major tensor. Shape entries are strictly positive and the
/// element count always matches the data length.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(element_count(shape_), T{0});
    }

    BasicTensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (element_count(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Size of the last axis; rows() * cols() == size().
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
    std::span<const T> row(std::size_t r) const {
        return std::span<const T>(data_).subspan(r * cols(), cols());
    }

    // Same data, new shape with identical element count.
    BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    // Exact equality of shape and values.
    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor shape " + shape_string(shape) + " has a zero extent");
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Bitwise comparison; distinguishes -0.0 from 0.0 and compares NaN payloads.
template <class T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace upscale
