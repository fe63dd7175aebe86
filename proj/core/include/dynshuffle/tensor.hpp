#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dynshuffle {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData;
}

// Dense row-major float32 tensor with an optional gradient slot.
//
// A Tensor is a shared handle: copies alias the same storage. Values are
// treated as immutable once an op has consumed them; only leaves (parameters,
// inputs) are mutated in place, and only between tape recordings.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    bool is(const Tensor& other) const { return data_ == other.data_; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const float> values() const;
    std::span<float> mutable_values();
    float item() const;
    float at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);

    bool has_grad() const;
    // Empty span when no gradient has been accumulated yet.
    std::span<const float> grad() const;
    // Allocates a zero gradient on first use.
    std::span<float> mutable_grad();
    void accumulate_grad(std::span<const float> delta);
    void zero_grad();
    void clear_grad();

    // Same values, fresh storage, no gradient history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

private:
    std::shared_ptr<detail::TensorData> data_;
};

}  // namespace dynshuffle
