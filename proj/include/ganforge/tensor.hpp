#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ganforge/errors.hpp"

namespace ganforge {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ",";
        out << shape[i];
    }
    out << "]";
    return out.str();
}

namespace detail {
inline std::int64_t next_tensor_id() {
    static std::atomic<std::int64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// Dense row-major tensor. Copies share the underlying buffer and the id;
// ops never mutate their inputs, so sharing is safe. The id is the handle
// the tape uses to connect values to gradient buffers.
template <typename S>
class Tensor {
public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<S>>()), id_(detail::next_tensor_id()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel(shape_)), S(0))),
          id_(detail::next_tensor_id()) {}

    Tensor(Shape shape, std::vector<S> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(std::move(values))), id_(detail::next_tensor_id()) {
        if (numel(shape_) != static_cast<std::int64_t>(data_->size()))
            throw ShapeError("value count " + std::to_string(data_->size()) + " does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, S value) {
        Tensor t(std::move(shape));
        for (auto& v : *t.data_) v = value;
        return t;
    }

    static Tensor scalar(S value) { return Tensor(Shape{1}, std::vector<S>{value}); }

    static Tensor from(Shape shape, std::initializer_list<S> values) {
        return Tensor(std::move(shape), std::vector<S>(values));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    std::vector<S>& values() { return *data_; }
    const std::vector<S>& values() const { return *data_; }

    S& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    S at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // Scalar convenience; loss values travel as 1-element tensors.
    S item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    std::int64_t id() const { return id_; }

    // Same buffer under a new shape and a fresh id. Tape-aware reshapes
    // live in ops.hpp; this is the raw metadata operation.
    Tensor viewed(Shape shape) const {
        if (numel(shape) != size())
            throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    // Fresh buffer with identical contents.
    Tensor clone() const { return Tensor(shape_, *data_); }

    bool all_finite() const {
        for (const S& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void require_finite(const std::string& op_name) const {
        for (std::size_t i = 0; i < data_->size(); ++i) {
            if (!std::isfinite(static_cast<double>((*data_)[i])))
                throw NumericError(op_name + ": non-finite value at flat index " + std::to_string(i));
        }
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    std::int64_t id_ = 0;
};

// Flat offset into an NCHW buffer.
inline std::int64_t nchw_index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                               std::int64_t C, std::int64_t H, std::int64_t W) {
    return ((n * C + c) * H + h) * W + w;
}

}  // namespace ganforge
