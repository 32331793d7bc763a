#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dyco {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major double-precision array. Rank 0 is a scalar holding one value.
class Tensor {
public:
    Tensor() : values_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        check_dims();
        if (values_.size() != shape_size(shape_))
            throw Error("tensor: " + std::to_string(values_.size()) +
                        " values do not fill shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return values_.size(); }

    /// Rows when viewed as a matrix whose last axis is the column axis.
    std::size_t rows() const { return shape_.empty() ? 1 : size() / shape_.back(); }
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

    double item() const {
        if (size() != 1) throw Error("tensor: item() on tensor of shape " + shape_str(shape_));
        return values_[0];
    }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    bool operator==(const Tensor&) const = default;

private:
    void check_dims() const {
        for (std::size_t d : shape_)
            if (d == 0) throw Error("tensor: zero-length dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

}  // namespace dyco
