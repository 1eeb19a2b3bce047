#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mscn/common.hpp"

namespace mscn {

/// Dense row-major array of 64-bit reals. Rank 0 (empty shape) is a scalar.
/// Dimension sizes of zero are allowed so that e.g. concatenation with an
/// empty vector is an identity.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), values_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != count(shape_)) {
            throw ShapeError("tensor: " + std::to_string(values_.size()) +
                             " values do not fill shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor vector(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.values_.begin(), t.values_.end(), v);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return values_.size(); }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Scalar access; throws unless the tensor holds exactly one value.
    double item() const {
        if (values_.size() != 1) {
            throw UsageError("item(): tensor of shape " + shape_str(shape_) + " is not a scalar");
        }
        return values_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : values_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool bitwise_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        return values_.empty() ||
               std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(double)) == 0;
    }

    std::uint64_t byte_checksum() const {
        return fnv1a64(values_.data(), values_.size() * sizeof(double));
    }

    std::string shape_str() const { return shape_str(shape_); }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ']';
        return os.str();
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

    /// Leaf tensors with this flag set receive gradients when recorded on a
    /// tape; see GradientTape::leaf.
    bool requires_grad = false;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

inline double l2_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return std::sqrt(s);
}

}  // namespace mscn
