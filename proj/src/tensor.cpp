#include "immlab/tensor.hpp"

#include "immlab/errors.hpp"
#include "immlab/kernels.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace immlab {

std::size_t shape_numel(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 2) {
        throw ShapeError("tensor rank must be 1 or 2, got " + std::to_string(shape.size()));
    }
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive");
        }
    }
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
}

bool Tensor::all_finite() const noexcept {
    for (float v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) {
            s += ",";
        }
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul requires rank-2 operands, got " + a.shape_string() + " x " +
                         b.shape_string());
    }
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimensions differ: " + a.shape_string() + " x " +
                         b.shape_string());
    }
    Tensor c({a.rows(), b.cols()});
    kernels::matmul(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(),
                    b.cols());
    require_finite(c, "matmul result");
    return c;
}

float frobenius_norm(const Tensor& a) {
    double sum = 0.0;
    for (float v : a.data()) {
        sum += static_cast<double>(v) * static_cast<double>(v);
    }
    return static_cast<float>(std::sqrt(sum));
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) {
        throw NumericError(what + " contains non-finite values");
    }
}

} // namespace immlab
