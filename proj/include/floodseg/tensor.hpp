#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "floodseg/errors.hpp"

namespace floodseg {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
bool all_finite(std::span<const double> values);

/// Dense row-major tensor of 64-bit floats. Copies share storage (and the
/// gradient buffer), so a copy held by an optimizer aliases the live
/// parameter. Gradients are allocated lazily on first accumulation.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(s_->shape.size()); }
    std::int64_t dim(std::int64_t axis) const;
    std::int64_t size() const { return static_cast<std::int64_t>(s_->values.size()); }

    std::span<double> values() { return s_->values; }
    std::span<const double> values() const { return s_->values; }
    double* data() { return s_->values.data(); }
    const double* data() const { return s_->values.data(); }

    /// Value of a single-element tensor; NotScalar otherwise.
    double item() const;

    bool requires_grad() const { return s_->requires_grad; }
    Tensor& set_requires_grad(bool on);

    bool has_grad() const { return !s_->grad.empty(); }
    /// Gradient buffer, zero-allocated on first use. Like the value storage,
    /// the buffer is shared between copies, so const is shallow here.
    std::span<double> grad() const;
    void clear_grad() const { s_->grad.clear(); }

    /// True when both tensors view the same storage.
    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    const void* storage_id() const { return s_.get(); }

private:
    struct Storage {
        Shape shape;
        std::vector<double> values;
        bool requires_grad = false;
        std::vector<double> grad;  // empty or values.size()
    };

    explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}

    std::shared_ptr<Storage> s_;
};

/// Records backward rules for one forward pass. Constructing a Tape makes it
/// the active tape for the current thread (restoring the previous one on
/// destruction); ops record onto the active tape when an input requires grad.
/// backward() runs the rules in reverse and consumes the tape. A Tape must
/// not be shared across threads.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and pulls gradients through every recorded
    /// node in reverse topological order. The node list is cleared afterwards.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }

    static Tape* current();

    /// Internal: append one backward rule. The closure must accumulate (+=)
    /// into input gradients and tolerate an output whose grad was never
    /// populated (meaning the output did not reach the loss).
    void record(std::function<void()> pull);

private:
    std::vector<std::function<void()>> nodes_;
    Tape* previous_ = nullptr;
};

namespace detail {

/// True when an op should record a backward rule for these inputs.
inline bool tracing(const Tensor& a) {
    return Tape::current() != nullptr && a.requires_grad();
}
inline bool tracing(const Tensor& a, const Tensor& b) {
    return Tape::current() != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace detail

}  // namespace floodseg
