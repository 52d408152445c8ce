#pragma once

// Shared oracles and helpers for the test suites. Reference implementations
// here are deliberately independent of the library's compute paths: naive
// loops, no Eigen, no im2col.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "floodseg/tensor.hpp"

namespace testutil {

inline floodseg::Tensor random_tensor(floodseg::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                      double hi = 1.0, bool requires_grad = false) {
    floodseg::Tensor t = floodseg::Tensor::zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

// Row-major [m×k] x [k×n] with explicit loops.
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::int64_t m, std::int64_t k, std::int64_t n) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t x = 0; x < k; ++x)
                acc += a[static_cast<std::size_t>(i * k + x)] * b[static_cast<std::size_t>(x * n + j)];
            c[static_cast<std::size_t>(i * n + j)] = acc;
        }
    return c;
}

// Six-loop cross-correlation reference.
inline std::vector<double> conv2d_ref(const std::vector<double>& input, std::int64_t cin,
                                      std::int64_t h, std::int64_t w,
                                      const std::vector<double>& kernel, std::int64_t cout,
                                      std::int64_t kh, std::int64_t kw, std::int64_t stride,
                                      std::int64_t pad) {
    const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t wo = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(cout * ho * wo), 0.0);
    for (std::int64_t co = 0; co < cout; ++co)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                for (std::int64_t ci = 0; ci < cin; ++ci)
                    for (std::int64_t ky = 0; ky < kh; ++ky)
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t iy = oy * stride + ky - pad;
                            const std::int64_t ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += input[static_cast<std::size_t>((ci * h + iy) * w + ix)] *
                                   kernel[static_cast<std::size_t>(((co * cin + ci) * kh + ky) * kw + kx)];
                        }
                out[static_cast<std::size_t>((co * ho + oy) * wo + ox)] = acc;
            }
    return out;
}

// Pixel-by-pixel bilinear interpolation oracle, align_corners=false.
inline std::vector<double> upsample_bilinear_ref(const std::vector<double>& input, std::int64_t c,
                                                 std::int64_t h, std::int64_t w,
                                                 std::int64_t factor) {
    const std::int64_t oh = h * factor, ow = w * factor;
    std::vector<double> out(static_cast<std::size_t>(c * oh * ow), 0.0);
    const auto sample = [&](std::int64_t ci, std::int64_t y, std::int64_t x) {
        y = std::max<std::int64_t>(0, std::min(y, h - 1));
        x = std::max<std::int64_t>(0, std::min(x, w - 1));
        return input[static_cast<std::size_t>((ci * h + y) * w + x)];
    };
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t oy = 0; oy < oh; ++oy)
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                const double sy = (oy + 0.5) / static_cast<double>(factor) - 0.5;
                const double sx = (ox + 0.5) / static_cast<double>(factor) - 0.5;
                const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
                const double fy = sy - std::floor(sy), fx = sx - std::floor(sx);
                const double v = (1 - fy) * ((1 - fx) * sample(ci, y0, x0) + fx * sample(ci, y0, x0 + 1)) +
                                 fy * ((1 - fx) * sample(ci, y0 + 1, x0) + fx * sample(ci, y0 + 1, x0 + 1));
                out[static_cast<std::size_t>((ci * oh + oy) * ow + ox)] = v;
            }
    return out;
}

struct GradCheck {
    std::int64_t checked = 0;
    std::int64_t failed = 0;
    double max_rel = 0.0;
};

// Central finite differences against tape gradients. `loss_fn` must rebuild
// the computation from the live parameter values on every call.
inline GradCheck grad_check(const std::function<floodseg::Tensor()>& loss_fn,
                            const std::vector<floodseg::Tensor>& params, double h = 1e-4,
                            double tol = 1e-3) {
    using floodseg::Tape;
    using floodseg::Tensor;

    for (const Tensor& p : params) p.clear_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    for (const Tensor& p : params) {
        analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                           : std::vector<double>(static_cast<std::size_t>(p.size()), 0.0));
        p.clear_grad();
    }

    GradCheck result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::int64_t i = 0; i < p.size(); ++i) {
            const double saved = p.data()[i];
            p.data()[i] = saved + h;
            const double plus = loss_fn().item();
            p.data()[i] = saved - h;
            const double minus = loss_fn().item();
            p.data()[i] = saved;
            const double fd = (plus - minus) / (2.0 * h);
            const double g = analytic[pi][static_cast<std::size_t>(i)];
            const double rel = std::abs(g - fd) / (std::abs(g) + 1e-8);
            result.max_rel = std::max(result.max_rel, rel);
            ++result.checked;
            if (rel >= tol) ++result.failed;
        }
    }
    return result;
}

}  // namespace testutil
