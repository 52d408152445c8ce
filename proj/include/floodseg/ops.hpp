#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "floodseg/tensor.hpp"

namespace floodseg {

// Free-function op surface over Tensor. Every op computes into a fresh tensor
// and, when an input requires grad and a Tape is active, records its backward
// rule. Binary ops require exactly equal shapes; the broadcast-like cases the
// model needs are spelled out as their own ops (add_rowvec, add_channel_bias,
// mul_channel_gate, mul_spatial_gate) so shape bugs fail loudly.

// -- structure -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_channels(std::span<const Tensor> parts);  // [C_i×H×W] -> [ΣC×H×W]

/// Rearranges [C×H×W] into one row per non-overlapping patch: row
/// gy*(W/p)+gx holds the patch at (gy,gx) flattened in (c,py,px) order.
Tensor image_to_patches(const Tensor& x, std::int64_t patch);

// -- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);

// -- named broadcasts ------------------------------------------------------

Tensor add_rowvec(const Tensor& m, const Tensor& v);          // [N×D] + [D]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);    // [C×H×W] + [C]
Tensor mul_channel_gate(const Tensor& x, const Tensor& g);    // [C×H×W] * [C]
Tensor mul_spatial_gate(const Tensor& x, const Tensor& g);    // [C×H×W] * [1×H×W]

// -- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// -- normalization ---------------------------------------------------------

/// Numerically stable softmax along `axis` (max-subtracted).
Tensor softmax(const Tensor& x, std::int64_t axis);

/// Row-wise layer normalization of [N×D] with affine scale/shift.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// -- spatial ---------------------------------------------------------------

/// Cross-correlation of [C_in×H×W] with [C_out×C_in×kh×kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding);

/// Bilinear upsampling by an integer factor, align_corners=false semantics.
/// Factor 1 is the identity.
Tensor upsample_bilinear(const Tensor& x, std::int64_t factor);

Tensor global_avg_pool(const Tensor& x);  // [C×H×W] -> [C]
Tensor channel_mean(const Tensor& x);     // [C×H×W] -> [1×H×W]

// -- reductions and losses -------------------------------------------------

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// Mean binary cross-entropy evaluated from logits (stable log1p form).
/// `targets` carries no gradient.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Soft Jaccard loss on sigmoid probabilities with additive smoothing 1.0:
/// 1 - (sum(p*t)+1)/(sum(p)+sum(t)-sum(p*t)+1).
Tensor soft_iou_loss(const Tensor& logits, const Tensor& targets);

}  // namespace floodseg
