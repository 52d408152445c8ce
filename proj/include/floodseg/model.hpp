#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "floodseg/ops.hpp"
#include "floodseg/tensor.hpp"

namespace floodseg {

/// Architecture hyperparameters. The dual-branch network emits features at
/// the three scales (H,W)/8, /4, /2, so height and width must be divisible
/// by 8 as well as by the patch size; the patch size itself must be a
/// multiple of 8 so the token grid upsamples to the coarsest scale by an
/// integer factor.
struct ModelConfig {
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::int64_t patch = 8;      // patch edge in pixels
    std::int64_t depth = 2;      // encoder layers
    std::int64_t heads = 4;      // attention heads
    std::int64_t embed_dim = 32; // token width
    std::array<std::int64_t, 3> cnn_channels{32, 16, 8};    // channels of v0,v1,v2
    std::array<std::int64_t, 3> fusion_channels{32, 16, 8}; // channels of f0,f1,f2
    std::uint64_t seed = 0;

    std::int64_t grid_h() const { return height / patch; }
    std::int64_t grid_w() const { return width / patch; }
    std::int64_t tokens() const { return grid_h() * grid_w(); }

    void validate() const;  // throws InvalidParam

    bool operator==(const ModelConfig&) const = default;
};

std::string serialize(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);

/// Decoder outputs: multi-scale maps t0 (H/8), t1 (H/4), t2 (H/2) plus the
/// encoded token sequence they were derived from.
struct TransformerFeatures {
    Tensor t0, t1, t2;
    Tensor z;  // [N×D]
};

/// Shallow-branch outputs v0 (H/8), v1 (H/4), v2 (H/2).
struct CnnFeatures {
    Tensor v0, v1, v2;
};

struct FusionMaps {
    Tensor f0, f1, f2;
};

struct ForwardResult {
    Tensor logits;  // [1×H×W]
    FusionMaps fusion;
    std::array<Tensor, 3> aux_logits;  // 1-channel maps at the fusion scales
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

/// Creates named parameters in registration order with seed-deterministic
/// He-style uniform initialization.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

    Tensor he_uniform(const std::string& name, Shape shape, std::int64_t fan_in);
    Tensor zeros(const std::string& name, Shape shape);
    Tensor ones(const std::string& name, Shape shape);

    std::vector<NamedParam> take() { return std::move(params_); }

private:
    Tensor track(const std::string& name, Tensor t);

    std::mt19937_64 rng_;
    std::vector<NamedParam> params_;
};

struct Linear {
    Tensor weight;  // [in×out]
    Tensor bias;    // [out]
    Tensor operator()(const Tensor& x) const { return add_rowvec(matmul(x, weight), bias); }
};

struct Conv {
    Tensor weight;  // [out×in×k×k]
    Tensor bias;    // [out]
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    Tensor operator()(const Tensor& x) const {
        return add_channel_bias(conv2d(x, weight, stride, padding), bias);
    }
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;
    Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }
};

/// Pre-norm transformer block: x + MSA(LN(x)), then y + FFN(LN(y)).
struct EncoderBlock {
    LayerNorm ln1, ln2;
    Linear qkv;   // D -> 3D packed [q|k|v]
    Linear proj;  // D -> D
    Linear fc1, fc2;
    std::int64_t heads = 1;

    Tensor attention(const Tensor& x) const;
    Tensor operator()(const Tensor& x) const;
};

/// Residual block: activation(conv2(conv1(x)) + skip(x)); conv1 and skip
/// carry the stride.
struct ResBlock {
    Conv conv1, conv2, skip;
    Tensor operator()(const Tensor& x) const {
        return relu(add(conv2(conv1(x)), skip(x)));
    }
};

/// Fuses one transformer/CNN scale pair: channel-gated t, spatially gated v,
/// and the Hadamard product of the two linearly projected streams, merged by
/// a residual block over their concatenation.
struct BiFusion {
    Conv project_t, project_v;  // 1×1 projections ahead of the Hadamard term
    Conv interaction_conv;
    Linear se_reduce, se_expand;
    Conv spatial_conv;
    ResBlock residual;

    Tensor channel_gate(const Tensor& t) const;
    Tensor spatial_gate(const Tensor& v) const;
    /// The Hadamard term project_t(t) ⊙ project_v(v) before its conv.
    Tensor interaction(const Tensor& t, const Tensor& v) const;
    Tensor operator()(const Tensor& t, const Tensor& v) const;
};

/// Dual-branch segmentation network: ViT encoder/decoder in parallel with a
/// three-block CNN, per-scale attention fusion, and a multi-level prediction
/// head emitting full-resolution water logits.
class Model {
public:
    explicit Model(const ModelConfig& config);

    /// [3×H×W] -> [N×D]: linear projection of flattened patches plus
    /// learned position embeddings.
    Tensor patch_embed(const Tensor& image) const;

    /// [N×D] -> [N×D] through `depth` pre-norm attention blocks.
    Tensor encode(const Tensor& tokens) const;

    /// Token grid -> multi-scale maps at H/8, H/4, H/2 via repeated
    /// (bilinear ×2, 3×3 conv, relu) stages.
    TransformerFeatures decode(const Tensor& z) const;

    /// Three stride-2 residual blocks: v2 (H/2), v1 (H/4), v0 (H/8).
    CnnFeatures cnn_branch(const Tensor& image) const;

    /// Fuses one scale pair with the per-scale parameter set.
    Tensor bifuse(const Tensor& t, const Tensor& v, int scale) const;

    /// Merges the fusion pyramid up to a [1×H×W] logit map. Sigmoid is
    /// applied downstream, not here.
    Tensor predict(const FusionMaps& fusion) const;

    ForwardResult forward(const Tensor& image) const;

    const ModelConfig& config() const { return config_; }
    std::span<const NamedParam> parameters() const { return params_; }
    Tensor parameter(const std::string& name) const;
    const BiFusion& fusion_stage(int scale) const;

private:
    ModelConfig config_;
    std::vector<NamedParam> params_;

    Linear patch_proj_;
    Tensor pos_embed_;
    std::vector<EncoderBlock> blocks_;
    std::array<Conv, 3> decoder_convs_;
    std::array<ResBlock, 3> cnn_blocks_;  // applied in order: image -> v2 -> v1 -> v0
    std::array<BiFusion, 3> fusions_;
    Conv head_p0_, head_m1_, head_m2_, head_out_;
    std::array<Conv, 3> aux_heads_;
};

/// Binary checkpoint: magic, version, config text block, then each parameter
/// as (name length, name, rank, dims, raw little-endian 64-bit floats).
/// Round trips are bit-exact.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace floodseg
