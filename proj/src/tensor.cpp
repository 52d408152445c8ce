#include "floodseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace floodseg {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

bool all_finite(std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

static void check_shape(const Shape& shape) {
    for (std::int64_t d : shape) {
        if (d <= 0) throw InvalidParam("tensor dimensions must be positive, got " + to_string(shape));
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape);
    auto s = std::make_shared<Storage>();
    s->values.assign(static_cast<std::size_t>(numel(shape)), 0.0);
    s->shape = std::move(shape);
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = value;
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeMismatch("value count " + std::to_string(values.size()) +
                            " does not fill shape " + to_string(shape));
    }
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    s->values = std::move(values);
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

std::int64_t Tensor::dim(std::int64_t axis) const {
    if (axis < 0 || axis >= rank()) {
        throw InvalidParam("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    }
    return s_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
    if (size() != 1) throw NotScalar("expected a scalar tensor, got " + to_string(shape()));
    return s_->values[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
}

std::span<double> Tensor::grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
    return s_->grad;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : previous_(g_active_tape) {
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = previous_;
}

Tape* Tape::current() {
    return g_active_tape;
}

void Tape::record(std::function<void()> pull) {
    nodes_.push_back(std::move(pull));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw NotScalar("backward() needs a scalar loss, got " + to_string(loss.shape()));
    }
    Tensor seed = loss;
    seed.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

}  // namespace floodseg
