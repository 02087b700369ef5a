#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <vector>

#include "spire/common.hpp"

namespace spire {

/// Dense row-major N-dimensional grid. 4-D tensors are N,C,H,W.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape, T fill = T(0))
        : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (std::int64_t e : shape_) {
            if (e < 1) throw ValidationError("tensor extent must be >= 1");
            n *= e;
        }
        data_.assign(static_cast<std::size_t>(n), fill);
    }

    std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
    const std::vector<std::int64_t>& shape() const { return shape_; }

    std::int64_t dim(int i) const {
        if (i < 0 || i >= ndim()) throw ValidationError("tensor dim index out of range");
        return shape_[static_cast<std::size_t>(i)];
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * shape_[1] + c)];
    }

    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Size-preserving shape change.
    void reshape(std::vector<std::int64_t> shape) {
        std::int64_t n = 1;
        for (std::int64_t e : shape) {
            if (e < 1) throw ValidationError("tensor extent must be >= 1");
            n *= e;
        }
        if (n != size()) throw ValidationError("reshape changes element count");
        shape_ = std::move(shape);
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << 'x';
            os << shape_[i];
        }
        os << ']';
        return os.str();
    }

private:
    std::vector<std::int64_t> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace spire
