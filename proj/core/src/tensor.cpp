#include "dynshuffle/tensor.hpp"

#include "dynshuffle/error.hpp"

#include <algorithm>
#include <sstream>

namespace dynshuffle {

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;
    bool requires_grad = false;
};
}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : data_(std::make_shared<detail::TensorData>()) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!data_) throw UsageError("use of an undefined tensor");
    return data_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return values().size(); }

std::span<const float> Tensor::values() const {
    if (!data_) throw UsageError("use of an undefined tensor");
    return data_->values;
}

std::span<float> Tensor::mutable_values() {
    if (!data_) throw UsageError("use of an undefined tensor");
    return data_->values;
}

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return data_->values[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return data_->values[flat];
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    if (!data_) throw UsageError("use of an undefined tensor");
    data_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    if (!data_) throw UsageError("use of an undefined tensor");
    return data_->grad;
}

std::span<float> Tensor::mutable_grad() {
    if (!data_) throw UsageError("use of an undefined tensor");
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0f);
    return data_->grad;
}

void Tensor::accumulate_grad(std::span<const float> delta) {
    auto g = mutable_grad();
    if (delta.size() != g.size()) {
        throw DimensionError("gradient of size " + std::to_string(delta.size()) + " for tensor " +
                             shape_str(shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void Tensor::zero_grad() {
    if (data_ && !data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
    if (data_) {
        data_->grad.clear();
        data_->grad.shrink_to_fit();
    }
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<float>(values().begin(), values().end())); }

}  // namespace dynshuffle
