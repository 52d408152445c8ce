#include "floodseg/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

namespace floodseg {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatRM>;
using MutMap = Eigen::Map<MatRM>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                            to_string(b.shape()) + " differ");
    }
}

void check_rank3(const Tensor& x, const char* op) {
    if (x.rank() != 3) {
        throw ShapeMismatch(std::string(op) + ": expected a [C×H×W] tensor, got " +
                            to_string(x.shape()));
    }
}

void check_no_target_grad(const Tensor& targets, const char* op) {
    if (targets.requires_grad()) {
        throw InvalidParam(std::string(op) + ": gradients w.r.t. targets are not supported");
    }
}

template <typename Fwd, typename Bwd>
Tensor unary_pointwise(const Tensor& a, Fwd f, Bwd dfdx) {
    Tensor out = Tensor::zeros(a.shape());
    const double* x = a.data();
    double* y = out.data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        Tape::current()->record([a, out, dfdx]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto ga = a.grad();
            const double* x = a.data();
            for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += go[i] * dfdx(x[i]);
        });
    }
    return out;
}

}  // namespace

// -- structure -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size()) {
        throw ShapeMismatch("reshape: " + to_string(x.shape()) + " has " +
                            std::to_string(x.size()) + " elements, target " +
                            to_string(new_shape) + " needs " + std::to_string(numel(new_shape)));
    }
    Tensor out = Tensor::from(std::move(new_shape),
                              std::vector<double>(x.values().begin(), x.values().end()));
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeMismatch("transpose: expected 2-D, got " + to_string(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    MutMap(out.data(), n, m) = ConstMap(x.data(), m, n).transpose();
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            MutMap(x.grad().data(), m, n) += ConstMap(out.grad().data(), n, m).transpose();
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count) {
    if (x.rank() != 2) throw ShapeMismatch("slice_cols: expected 2-D, got " + to_string(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    if (start < 0 || count <= 0 || start + count > n) {
        throw InvalidParam("slice_cols: [" + std::to_string(start) + ", " +
                           std::to_string(start + count) + ") out of range for " +
                           to_string(x.shape()));
    }
    Tensor out = Tensor::zeros({m, count});
    for (std::int64_t i = 0; i < m; ++i) {
        const double* src = x.data() + i * n + start;
        std::copy(src, src + count, out.data() + i * count);
    }
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, m, n, start, count]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < count; ++j)
                    gx[i * n + start + j] += go[i * count + j];
        });
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw InvalidParam("concat_cols: no inputs");
    const std::int64_t m = parts[0].rank() == 2 ? parts[0].dim(0) : -1;
    std::int64_t total = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) {
            throw ShapeMismatch("concat_cols: expected matching [N×*] blocks, got " +
                                to_string(p.shape()));
        }
        total += p.dim(1);
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros({m, total});
    std::int64_t offset = 0;
    for (const Tensor& p : parts) {
        const std::int64_t c = p.dim(1);
        for (std::int64_t i = 0; i < m; ++i)
            std::copy(p.data() + i * c, p.data() + (i + 1) * c, out.data() + i * total + offset);
        offset += c;
    }
    if (Tape::current() != nullptr && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held(parts.begin(), parts.end());
        Tape::current()->record([held, out, m, total]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            std::int64_t offset = 0;
            for (Tensor& p : held) {
                const std::int64_t c = p.dim(1);
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < c; ++j)
                            gp[i * c + j] += go[i * total + offset + j];
                }
                offset += c;
            }
        });
    }
    return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw InvalidParam("concat_channels: no inputs");
    check_rank3(parts[0], "concat_channels");
    const std::int64_t h = parts[0].dim(1), w = parts[0].dim(2);
    std::int64_t channels = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        check_rank3(p, "concat_channels");
        if (p.dim(1) != h || p.dim(2) != w) {
            throw ShapeMismatch("concat_channels: spatial size " + to_string(p.shape()) +
                                " does not match [*×" + std::to_string(h) + "×" +
                                std::to_string(w) + "]");
        }
        channels += p.dim(0);
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros({channels, h, w});
    double* dst = out.data();
    for (const Tensor& p : parts) {
        std::copy(p.values().begin(), p.values().end(), dst);
        dst += p.size();
    }
    if (Tape::current() != nullptr && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held(parts.begin(), parts.end());
        Tape::current()->record([held, out]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            std::int64_t offset = 0;
            for (Tensor& p : held) {
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::int64_t i = 0; i < p.size(); ++i) gp[i] += go[offset + i];
                }
                offset += p.size();
            }
        });
    }
    return out;
}

Tensor image_to_patches(const Tensor& x, std::int64_t patch) {
    check_rank3(x, "image_to_patches");
    if (patch <= 0) throw InvalidParam("image_to_patches: patch size must be positive");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % patch != 0 || w % patch != 0) {
        throw ShapeMismatch("image_to_patches: " + to_string(x.shape()) +
                            " not divisible into " + std::to_string(patch) + "-pixel patches");
    }
    const std::int64_t gh = h / patch, gw = w / patch;
    const std::int64_t n = gh * gw, d = c * patch * patch;
    Tensor out = Tensor::zeros({n, d});
    double* y = out.data();
    const double* src = x.data();
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
            double* row = y + (gy * gw + gx) * d;
            for (std::int64_t cc = 0; cc < c; ++cc)
                for (std::int64_t py = 0; py < patch; ++py)
                    for (std::int64_t px = 0; px < patch; ++px)
                        row[(cc * patch + py) * patch + px] =
                            src[(cc * h + gy * patch + py) * w + gx * patch + px];
        }
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, patch, c, h, w, gh, gw, d]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx_ = x.grad();
            for (std::int64_t gy = 0; gy < gh; ++gy)
                for (std::int64_t gx = 0; gx < gw; ++gx) {
                    const double* row = go.data() + (gy * gw + gx) * d;
                    for (std::int64_t cc = 0; cc < c; ++cc)
                        for (std::int64_t py = 0; py < patch; ++py)
                            for (std::int64_t px = 0; px < patch; ++px)
                                gx_[(cc * h + gy * patch + py) * w + gx * patch + px] +=
                                    row[(cc * patch + py) * patch + px];
                }
        });
    }
    return out;
}

// -- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        Tape::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        Tape::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < b.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        Tape::current()->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += go[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += go[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    return unary_pointwise(
        a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Tensor relu(const Tensor& a) {
    return unary_pointwise(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
    auto f = [](double x) {
        const double u = kGeluScale * (x + kGeluCubic * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    };
    auto df = [](double x) {
        const double u = kGeluScale * (x + kGeluCubic * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    };
    return unary_pointwise(a, f, df);
}

Tensor sigmoid(const Tensor& a) {
    auto f = [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    };
    auto df = [f](double x) {
        const double s = f(x);
        return s * (1.0 - s);
    };
    return unary_pointwise(a, f, df);
}

// -- named broadcasts ------------------------------------------------------

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || v.dim(0) != m.dim(1)) {
        throw ShapeMismatch("add_rowvec: " + to_string(m.shape()) + " + " + to_string(v.shape()));
    }
    const std::int64_t rows = m.dim(0), cols = m.dim(1);
    Tensor out = Tensor::zeros(m.shape());
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j)
            out.data()[i * cols + j] = m.data()[i * cols + j] + v.data()[j];
    if (detail::tracing(m, v)) {
        out.set_requires_grad(true);
        Tape::current()->record([m, v, out, rows, cols]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (m.requires_grad()) {
                auto gm = m.grad();
                for (std::int64_t i = 0; i < m.size(); ++i) gm[i] += go[i];
            }
            if (v.requires_grad()) {
                auto gv = v.grad();
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j) gv[j] += go[i * cols + j];
            }
        });
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check_rank3(x, "add_channel_bias");
    if (b.rank() != 1 || b.dim(0) != x.dim(0)) {
        throw ShapeMismatch("add_channel_bias: " + to_string(x.shape()) + " + " +
                            to_string(b.shape()));
    }
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t p = 0; p < hw; ++p)
            out.data()[i * hw + p] = x.data()[i * hw + p] + b.data()[i];
    if (detail::tracing(x, b)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, b, out, c, hw]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < c; ++i)
                    for (std::int64_t p = 0; p < hw; ++p) gb[i] += go[i * hw + p];
            }
        });
    }
    return out;
}

Tensor mul_channel_gate(const Tensor& x, const Tensor& g) {
    check_rank3(x, "mul_channel_gate");
    if (g.rank() != 1 || g.dim(0) != x.dim(0)) {
        throw ShapeMismatch("mul_channel_gate: " + to_string(x.shape()) + " * " +
                            to_string(g.shape()));
    }
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t p = 0; p < hw; ++p)
            out.data()[i * hw + p] = x.data()[i * hw + p] * g.data()[i];
    if (detail::tracing(x, g)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, g, out, c, hw]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t i = 0; i < c; ++i)
                    for (std::int64_t p = 0; p < hw; ++p)
                        gx[i * hw + p] += go[i * hw + p] * g.data()[i];
            }
            if (g.requires_grad()) {
                auto gg = g.grad();
                for (std::int64_t i = 0; i < c; ++i)
                    for (std::int64_t p = 0; p < hw; ++p)
                        gg[i] += go[i * hw + p] * x.data()[i * hw + p];
            }
        });
    }
    return out;
}

Tensor mul_spatial_gate(const Tensor& x, const Tensor& g) {
    check_rank3(x, "mul_spatial_gate");
    if (g.rank() != 3 || g.dim(0) != 1 || g.dim(1) != x.dim(1) || g.dim(2) != x.dim(2)) {
        throw ShapeMismatch("mul_spatial_gate: " + to_string(x.shape()) + " * " +
                            to_string(g.shape()));
    }
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t p = 0; p < hw; ++p)
            out.data()[i * hw + p] = x.data()[i * hw + p] * g.data()[p];
    if (detail::tracing(x, g)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, g, out, c, hw]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t i = 0; i < c; ++i)
                    for (std::int64_t p = 0; p < hw; ++p)
                        gx[i * hw + p] += go[i * hw + p] * g.data()[p];
            }
            if (g.requires_grad()) {
                auto gg = g.grad();
                for (std::int64_t i = 0; i < c; ++i)
                    for (std::int64_t p = 0; p < hw; ++p)
                        gg[p] += go[i * hw + p] * x.data()[i * hw + p];
            }
        });
    }
    return out;
}

// -- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeMismatch("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data(), m, k) * ConstMap(b.data(), k, n);
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        Tape::current()->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            ConstMap go(out.grad().data(), m, n);
            if (a.requires_grad()) {
                MutMap(a.grad().data(), m, k).noalias() +=
                    go * ConstMap(b.data(), k, n).transpose();
            }
            if (b.requires_grad()) {
                MutMap(b.grad().data(), k, n).noalias() +=
                    ConstMap(a.data(), m, k).transpose() * go;
            }
        });
    }
    return out;
}

// -- normalization ---------------------------------------------------------

Tensor softmax(const Tensor& x, std::int64_t axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw InvalidParam("softmax: axis " + std::to_string(axis) + " out of range for " +
                           to_string(x.shape()));
    }
    const Shape& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    const std::int64_t n = s[static_cast<std::size_t>(axis)];
    for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];

    Tensor out = Tensor::zeros(x.shape());
    const double* xv = x.data();
    double* yv = out.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = xv[base];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                yv[base + j * inner] = e;
                z += e;
            }
            for (std::int64_t j = 0; j < n; ++j) yv[base + j * inner] /= z;
        }
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, outer, n, inner]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            const double* y = out.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const std::int64_t idx = base + j * inner;
                        dot += go[idx] * y[idx];
                    }
                    for (std::int64_t j = 0; j < n; ++j) {
                        const std::int64_t idx = base + j * inner;
                        gx[idx] += y[idx] * (go[idx] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw InvalidParam("layernorm: eps must be positive");
    if (x.rank() != 2) throw ShapeMismatch("layernorm: expected [N×D], got " + to_string(x.shape()));
    const std::int64_t rows = x.dim(0), d = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw ShapeMismatch("layernorm: affine params " + to_string(gamma.shape()) + "/" +
                            to_string(beta.shape()) + " do not match feature dim " +
                            std::to_string(d));
    }
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(static_cast<std::size_t>(x.size()));
    std::vector<double> invstd(static_cast<std::size_t>(rows));
    for (std::int64_t i = 0; i < rows; ++i) {
        const double* row = x.data() + i * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(i)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * is;
            xhat[static_cast<std::size_t>(i * d + j)] = xh;
            out.data()[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    const bool trace = Tape::current() != nullptr &&
                       (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (trace) {
        out.set_requires_grad(true);
        Tape::current()->record(
            [x, gamma, beta, out, rows, d, xhat = std::move(xhat), invstd = std::move(invstd)]() mutable {
                if (!out.has_grad()) return;
                auto go = out.grad();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const double* gy = go.data() + i * d;
                    const double* xh = xhat.data() + i * d;
                    if (gamma.requires_grad()) {
                        auto gg = gamma.grad();
                        for (std::int64_t j = 0; j < d; ++j) gg[j] += gy[j] * xh[j];
                    }
                    if (beta.requires_grad()) {
                        auto gb = beta.grad();
                        for (std::int64_t j = 0; j < d; ++j) gb[j] += gy[j];
                    }
                    if (x.requires_grad()) {
                        auto gx = x.grad();
                        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                        for (std::int64_t j = 0; j < d; ++j) {
                            const double dxh = gy[j] * gamma.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= static_cast<double>(d);
                        mean_dxh_xh /= static_cast<double>(d);
                        const double is = invstd[static_cast<std::size_t>(i)];
                        for (std::int64_t j = 0; j < d; ++j) {
                            const double dxh = gy[j] * gamma.data()[j];
                            gx[i * d + j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            });
    }
    return out;
}

// -- spatial ---------------------------------------------------------------

namespace {

// Gathers conv patches into a [C_in·kh·kw × Ho·Wo] column matrix.
std::vector<double> im2col(const Tensor& input, std::int64_t kh, std::int64_t kw,
                           std::int64_t stride, std::int64_t pad, std::int64_t ho,
                           std::int64_t wo) {
    const std::int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    std::vector<double> cols(static_cast<std::size_t>(c * kh * kw * ho * wo), 0.0);
    const std::int64_t ncols = ho * wo;
    const double* src = input.data();
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                double* dst = cols.data() + ((ci * kh + ky) * kw + kx) * ncols;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        dst += wo;
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < wo; ++ox, ++dst) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) *dst = src[(ci * h + iy) * w + ix];
                    }
                }
            }
    return cols;
}

// Scatters a column-matrix gradient back onto the input layout.
void col2im_accumulate(std::span<const double> cols, std::span<double> ginput, std::int64_t c,
                       std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
                       std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo) {
    const std::int64_t ncols = ho * wo;
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const double* src = cols.data() + ((ci * kh + ky) * kw + kx) * ncols;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        src += wo;
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < wo; ++ox, ++src) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) ginput[(ci * h + iy) * w + ix] += *src;
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding) {
    check_rank3(input, "conv2d");
    if (kernel.rank() != 4) {
        throw ShapeMismatch("conv2d: kernel must be [C_out×C_in×kh×kw], got " +
                            to_string(kernel.shape()));
    }
    if (stride <= 0) throw InvalidParam("conv2d: stride must be positive");
    if (padding < 0) throw InvalidParam("conv2d: padding must be non-negative");
    const std::int64_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin) {
        throw ShapeMismatch("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                            std::to_string(kernel.dim(1)));
    }
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        throw ShapeMismatch("conv2d: kernel " + to_string(kernel.shape()) +
                            " larger than padded input " + to_string(input.shape()));
    }
    const std::int64_t ho = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t wo = (w + 2 * padding - kw) / stride + 1;
    const std::int64_t kdim = cin * kh * kw;

    std::vector<double> cols = im2col(input, kh, kw, stride, padding, ho, wo);
    Tensor out = Tensor::zeros({cout, ho, wo});
    MutMap(out.data(), cout, ho * wo).noalias() =
        ConstMap(kernel.data(), cout, kdim) * ConstMap(cols.data(), kdim, ho * wo);

    if (detail::tracing(input, kernel)) {
        out.set_requires_grad(true);
        Tape::current()->record([input, kernel, out, cols = std::move(cols), stride, padding, cin,
                                 h, w, cout, kh, kw, ho, wo, kdim]() mutable {
            if (!out.has_grad()) return;
            ConstMap go(out.grad().data(), cout, ho * wo);
            if (kernel.requires_grad()) {
                MutMap(kernel.grad().data(), cout, kdim).noalias() +=
                    go * ConstMap(cols.data(), kdim, ho * wo).transpose();
            }
            if (input.requires_grad()) {
                std::vector<double> gcols(static_cast<std::size_t>(kdim * ho * wo));
                MutMap(gcols.data(), kdim, ho * wo).noalias() =
                    ConstMap(kernel.data(), cout, kdim).transpose() * go;
                col2im_accumulate(gcols, input.grad(), cin, h, w, kh, kw, stride, padding, ho, wo);
            }
        });
    }
    return out;
}

namespace {

struct LerpIndex {
    std::int64_t lo, hi;
    double w_lo, w_hi;
};

// align_corners=false: source coordinate of output index o at integer factor f
// is (o + 0.5)/f - 0.5, clamped to the valid range.
std::vector<LerpIndex> bilinear_axis(std::int64_t in, std::int64_t factor) {
    std::vector<LerpIndex> idx(static_cast<std::size_t>(in * factor));
    for (std::int64_t o = 0; o < in * factor; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        const double f = std::floor(src);
        const std::int64_t i0 = static_cast<std::int64_t>(f);
        LerpIndex& e = idx[static_cast<std::size_t>(o)];
        e.lo = std::clamp<std::int64_t>(i0, 0, in - 1);
        e.hi = std::clamp<std::int64_t>(i0 + 1, 0, in - 1);
        e.w_hi = src - f;
        e.w_lo = 1.0 - e.w_hi;
    }
    return idx;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::int64_t factor) {
    check_rank3(x, "upsample_bilinear");
    if (factor <= 0) throw InvalidParam("upsample_bilinear: factor must be positive");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t oh = h * factor, ow = w * factor;
    const std::vector<LerpIndex> ys = bilinear_axis(h, factor);
    const std::vector<LerpIndex> xs = bilinear_axis(w, factor);

    Tensor out = Tensor::zeros({c, oh, ow});
    const double* src = x.data();
    double* dst = out.data();
    for (std::int64_t ci = 0; ci < c; ++ci) {
        const double* plane = src + ci * h * w;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            const LerpIndex& ry = ys[static_cast<std::size_t>(oy)];
            for (std::int64_t ox = 0; ox < ow; ++ox, ++dst) {
                const LerpIndex& rx = xs[static_cast<std::size_t>(ox)];
                *dst = ry.w_lo * (rx.w_lo * plane[ry.lo * w + rx.lo] +
                                  rx.w_hi * plane[ry.lo * w + rx.hi]) +
                       ry.w_hi * (rx.w_lo * plane[ry.hi * w + rx.lo] +
                                  rx.w_hi * plane[ry.hi * w + rx.hi]);
            }
        }
    }
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, ys, xs, c, h, w, oh, ow]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            const double* gsrc = go.data();
            for (std::int64_t ci = 0; ci < c; ++ci) {
                double* gplane = gx.data() + ci * h * w;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const LerpIndex& ry = ys[static_cast<std::size_t>(oy)];
                    for (std::int64_t ox = 0; ox < ow; ++ox, ++gsrc) {
                        const LerpIndex& rx = xs[static_cast<std::size_t>(ox)];
                        const double g = *gsrc;
                        gplane[ry.lo * w + rx.lo] += ry.w_lo * rx.w_lo * g;
                        gplane[ry.lo * w + rx.hi] += ry.w_lo * rx.w_hi * g;
                        gplane[ry.hi * w + rx.lo] += ry.w_hi * rx.w_lo * g;
                        gplane[ry.hi * w + rx.hi] += ry.w_hi * rx.w_hi * g;
                    }
                }
            }
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    check_rank3(x, "global_avg_pool");
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros({c});
    for (std::int64_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) acc += x.data()[i * hw + p];
        out.data()[i] = acc / static_cast<double>(hw);
    }
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, c, hw]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < c; ++i) {
                const double g = go[i] / static_cast<double>(hw);
                for (std::int64_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
            }
        });
    }
    return out;
}

Tensor channel_mean(const Tensor& x) {
    check_rank3(x, "channel_mean");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t hw = h * w;
    Tensor out = Tensor::zeros({1, h, w});
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t p = 0; p < hw; ++p) out.data()[p] += x.data()[i * hw + p];
    for (std::int64_t p = 0; p < hw; ++p) out.data()[p] /= static_cast<double>(c);
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out, c, hw]() mutable {
            if (!out.has_grad()) return;
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < c; ++i)
                for (std::int64_t p = 0; p < hw; ++p)
                    gx[i * hw + p] += go[p] / static_cast<double>(c);
        });
    }
    return out;
}

// -- reductions and losses -------------------------------------------------

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (detail::tracing(x)) {
        out.set_requires_grad(true);
        Tape::current()->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto gx = x.grad();
            for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "bce_with_logits");
    check_no_target_grad(targets, "bce_with_logits");
    const std::int64_t n = logits.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = logits.data()[i], t = targets.data()[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::tracing(logits)) {
        out.set_requires_grad(true);
        Tape::current()->record([logits, targets, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / static_cast<double>(n);
            auto gz = logits.grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const double z = logits.data()[i];
                const double s =
                    z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                gz[i] += g * (s - targets.data()[i]);
            }
        });
    }
    return out;
}

Tensor soft_iou_loss(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "soft_iou_loss");
    check_no_target_grad(targets, "soft_iou_loss");
    const std::int64_t n = logits.size();
    std::vector<double> probs(static_cast<std::size_t>(n));
    double inter = 0.0, total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        probs[static_cast<std::size_t>(i)] = p;
        inter += p * targets.data()[i];
        total += p + targets.data()[i];
    }
    const double a = inter + 1.0;
    const double b = total - inter + 1.0;  // union + smoothing
    Tensor out = Tensor::scalar(1.0 - a / b);
    if (detail::tracing(logits)) {
        out.set_requires_grad(true);
        Tape::current()->record([logits, targets, out, probs = std::move(probs), a, b, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto gz = logits.grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const double t = targets.data()[i];
                const double p = probs[static_cast<std::size_t>(i)];
                const double dloss_dp = -(t * b - a * (1.0 - t)) / (b * b);
                gz[i] += g * dloss_dp * p * (1.0 - p);
            }
        });
    }
    return out;
}

}  // namespace floodseg
