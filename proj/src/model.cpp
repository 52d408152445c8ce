#include "floodseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "floodseg/errors.hpp"

namespace floodseg {

void ModelConfig::validate() const {
    if (height <= 0 || width <= 0 || patch <= 0 || depth < 0 || heads <= 0 || embed_dim <= 0) {
        throw InvalidParam("model config fields must be positive (depth may be zero)");
    }
    if (height % patch != 0 || width % patch != 0) {
        throw InvalidParam("image size must be divisible by the patch size");
    }
    if (height % 8 != 0 || width % 8 != 0) {
        throw InvalidParam("image size must be divisible by 8");
    }
    if (patch % 8 != 0) {
        throw InvalidParam("patch size must be a multiple of 8");
    }
    if (embed_dim % heads != 0) {
        throw InvalidParam("embed_dim must be divisible by the head count");
    }
    for (std::int64_t c : cnn_channels) {
        if (c <= 0) throw InvalidParam("cnn channel widths must be positive");
    }
    for (std::int64_t c : fusion_channels) {
        if (c <= 0) throw InvalidParam("fusion channel widths must be positive");
    }
}

std::string serialize(const ModelConfig& c) {
    std::ostringstream out;
    out << "height=" << c.height << '\n'
        << "width=" << c.width << '\n'
        << "patch=" << c.patch << '\n'
        << "depth=" << c.depth << '\n'
        << "heads=" << c.heads << '\n'
        << "embed_dim=" << c.embed_dim << '\n'
        << "cnn_channels=" << c.cnn_channels[0] << ',' << c.cnn_channels[1] << ','
        << c.cnn_channels[2] << '\n'
        << "fusion_channels=" << c.fusion_channels[0] << ',' << c.fusion_channels[1] << ','
        << c.fusion_channels[2] << '\n'
        << "seed=" << c.seed << '\n';
    return out.str();
}

namespace {

std::array<std::int64_t, 3> parse_triple(const std::string& value) {
    std::array<std::int64_t, 3> out{};
    std::istringstream in(value);
    std::string item;
    for (int i = 0; i < 3; ++i) {
        if (!std::getline(in, item, ',')) throw DecodeError("expected 3 channel widths, got '" + value + "'");
        out[static_cast<std::size_t>(i)] = std::stoll(item);
    }
    return out;
}

}  // namespace

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DecodeError("malformed config line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "height") c.height = std::stoll(value);
        else if (key == "width") c.width = std::stoll(value);
        else if (key == "patch") c.patch = std::stoll(value);
        else if (key == "depth") c.depth = std::stoll(value);
        else if (key == "heads") c.heads = std::stoll(value);
        else if (key == "embed_dim") c.embed_dim = std::stoll(value);
        else if (key == "cnn_channels") c.cnn_channels = parse_triple(value);
        else if (key == "fusion_channels") c.fusion_channels = parse_triple(value);
        else if (key == "seed") c.seed = std::stoull(value);
        else throw DecodeError("unknown config key '" + key + "'");
    }
    c.validate();
    return c;
}

// -- parameter store ---------------------------------------------------------

Tensor ParamStore::track(const std::string& name, Tensor t) {
    for (const NamedParam& p : params_) {
        if (p.name == name) throw InvalidParam("duplicate parameter name '" + name + "'");
    }
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
}

Tensor ParamStore::he_uniform(const std::string& name, Shape shape, std::int64_t fan_in) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    for (double& v : t.values()) v = uniform(rng_);
    return track(name, t);
}

Tensor ParamStore::zeros(const std::string& name, Shape shape) {
    return track(name, Tensor::zeros(std::move(shape)));
}

Tensor ParamStore::ones(const std::string& name, Shape shape) {
    return track(name, Tensor::full(std::move(shape), 1.0));
}

namespace {

Linear make_linear(ParamStore& store, const std::string& prefix, std::int64_t in, std::int64_t out) {
    Linear layer;
    layer.weight = store.he_uniform(prefix + ".w", {in, out}, in);
    layer.bias = store.zeros(prefix + ".b", {out});
    return layer;
}

Conv make_conv(ParamStore& store, const std::string& prefix, std::int64_t in, std::int64_t out,
               std::int64_t k, std::int64_t stride, std::int64_t padding) {
    Conv layer;
    layer.weight = store.he_uniform(prefix + ".w", {out, in, k, k}, in * k * k);
    layer.bias = store.zeros(prefix + ".b", {out});
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

LayerNorm make_layernorm(ParamStore& store, const std::string& prefix, std::int64_t d) {
    LayerNorm layer;
    layer.gamma = store.ones(prefix + ".g", {d});
    layer.beta = store.zeros(prefix + ".b", {d});
    return layer;
}

ResBlock make_resblock(ParamStore& store, const std::string& prefix, std::int64_t in,
                       std::int64_t out, std::int64_t stride) {
    ResBlock block;
    block.conv1 = make_conv(store, prefix + ".c1", in, out, 3, stride, 1);
    block.conv2 = make_conv(store, prefix + ".c2", out, out, 3, 1, 1);
    block.skip = make_conv(store, prefix + ".skip", in, out, 1, stride, 0);
    return block;
}

BiFusion make_bifusion(ParamStore& store, const std::string& prefix, std::int64_t channels,
                       std::int64_t fused) {
    BiFusion fusion;
    fusion.project_t = make_conv(store, prefix + ".wt", channels, fused, 1, 1, 0);
    fusion.project_v = make_conv(store, prefix + ".wv", channels, fused, 1, 1, 0);
    fusion.interaction_conv = make_conv(store, prefix + ".hconv", fused, fused, 3, 1, 1);
    const std::int64_t bottleneck = std::max<std::int64_t>(channels / 2, 1);
    fusion.se_reduce = make_linear(store, prefix + ".se1", channels, bottleneck);
    fusion.se_expand = make_linear(store, prefix + ".se2", bottleneck, channels);
    fusion.spatial_conv = make_conv(store, prefix + ".spat", 1, 1, 3, 1, 1);
    fusion.residual = make_resblock(store, prefix + ".res", 2 * channels + fused, fused, 1);
    return fusion;
}

}  // namespace

// -- encoder block -----------------------------------------------------------

Tensor EncoderBlock::attention(const Tensor& x) const {
    const std::int64_t d = x.dim(1);
    const std::int64_t head_dim = d / heads;
    const Tensor packed = qkv(x);  // [N×3D]
    std::vector<Tensor> outputs;
    outputs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        const Tensor q = slice_cols(packed, h * head_dim, head_dim);
        const Tensor k = slice_cols(packed, d + h * head_dim, head_dim);
        const Tensor v = slice_cols(packed, 2 * d + h * head_dim, head_dim);
        const Tensor scores =
            scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        const Tensor weights = softmax(scores, 1);
        outputs.push_back(matmul(weights, v));
    }
    return proj(concat_cols(outputs));
}

Tensor EncoderBlock::operator()(const Tensor& x) const {
    const Tensor y = add(x, attention(ln1(x)));
    return add(y, fc2(gelu(fc1(ln2(y)))));
}

// -- fusion stage ------------------------------------------------------------

Tensor BiFusion::channel_gate(const Tensor& t) const {
    const std::int64_t channels = t.dim(0);
    const Tensor pooled = reshape(global_avg_pool(t), {1, channels});
    const Tensor gate = sigmoid(se_expand(relu(se_reduce(pooled))));
    return mul_channel_gate(t, reshape(gate, {channels}));
}

Tensor BiFusion::spatial_gate(const Tensor& v) const {
    return mul_spatial_gate(v, sigmoid(spatial_conv(channel_mean(v))));
}

Tensor BiFusion::interaction(const Tensor& t, const Tensor& v) const {
    return mul(project_t(t), project_v(v));
}

Tensor BiFusion::operator()(const Tensor& t, const Tensor& v) const {
    if (t.rank() != 3 || v.rank() != 3 || t.dim(1) != v.dim(1) || t.dim(2) != v.dim(2)) {
        throw ShapeMismatch("bifuse: spatial sizes " + to_string(t.shape()) + " vs " +
                            to_string(v.shape()));
    }
    const std::array<Tensor, 3> parts{channel_gate(t), spatial_gate(v),
                                      interaction_conv(interaction(t, v))};
    return residual(concat_channels(parts));
}

// -- model -------------------------------------------------------------------

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    ParamStore store(config_.seed);

    const std::int64_t d = config_.embed_dim;
    const std::int64_t patch_dim = 3 * config_.patch * config_.patch;
    patch_proj_ = make_linear(store, "patch.proj", patch_dim, d);
    pos_embed_ = store.he_uniform("patch.pos", {config_.tokens(), d}, d);

    blocks_.reserve(static_cast<std::size_t>(config_.depth));
    for (std::int64_t i = 0; i < config_.depth; ++i) {
        const std::string prefix = "enc" + std::to_string(i);
        EncoderBlock block;
        block.ln1 = make_layernorm(store, prefix + ".ln1", d);
        block.qkv = make_linear(store, prefix + ".qkv", d, 3 * d);
        block.proj = make_linear(store, prefix + ".proj", d, d);
        block.ln2 = make_layernorm(store, prefix + ".ln2", d);
        block.fc1 = make_linear(store, prefix + ".fc1", d, 4 * d);
        block.fc2 = make_linear(store, prefix + ".fc2", 4 * d, d);
        block.heads = config_.heads;
        blocks_.push_back(std::move(block));
    }

    const auto& cc = config_.cnn_channels;
    decoder_convs_[0] = make_conv(store, "dec0", d, cc[0], 3, 1, 1);
    decoder_convs_[1] = make_conv(store, "dec1", cc[0], cc[1], 3, 1, 1);
    decoder_convs_[2] = make_conv(store, "dec2", cc[1], cc[2], 3, 1, 1);

    cnn_blocks_[0] = make_resblock(store, "cnn0", 3, cc[2], 2);
    cnn_blocks_[1] = make_resblock(store, "cnn1", cc[2], cc[1], 2);
    cnn_blocks_[2] = make_resblock(store, "cnn2", cc[1], cc[0], 2);

    const auto& fc = config_.fusion_channels;
    for (int i = 0; i < 3; ++i) {
        fusions_[static_cast<std::size_t>(i)] = make_bifusion(
            store, "fuse" + std::to_string(i), cc[static_cast<std::size_t>(i)],
            fc[static_cast<std::size_t>(i)]);
    }

    const std::int64_t hc = fc[2];
    head_p0_ = make_conv(store, "head.p0", fc[0], hc, 3, 1, 1);
    head_m1_ = make_conv(store, "head.m1", hc + fc[1], hc, 3, 1, 1);
    head_m2_ = make_conv(store, "head.m2", hc + fc[2], hc, 3, 1, 1);
    head_out_ = make_conv(store, "head.out", hc, 1, 1, 1, 0);
    for (int i = 0; i < 3; ++i) {
        aux_heads_[static_cast<std::size_t>(i)] = make_conv(
            store, "head.aux" + std::to_string(i), fc[static_cast<std::size_t>(i)], 1, 1, 1, 0);
    }

    params_ = store.take();
}

Tensor Model::parameter(const std::string& name) const {
    for (const NamedParam& p : params_) {
        if (p.name == name) return p.tensor;
    }
    throw InvalidParam("no parameter named '" + name + "'");
}

const BiFusion& Model::fusion_stage(int scale) const {
    if (scale < 0 || scale > 2) throw InvalidParam("fusion scale must be 0, 1, or 2");
    return fusions_[static_cast<std::size_t>(scale)];
}

Tensor Model::patch_embed(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != config_.height ||
        image.dim(2) != config_.width) {
        throw ShapeMismatch("patch_embed: image " + to_string(image.shape()) + " does not match [3×" +
                            std::to_string(config_.height) + "×" + std::to_string(config_.width) + "]");
    }
    const Tensor patches = image_to_patches(image, config_.patch);
    return add(patch_proj_(patches), pos_embed_);
}

Tensor Model::encode(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(0) != config_.tokens() || tokens.dim(1) != config_.embed_dim) {
        throw ShapeMismatch("encode: tokens " + to_string(tokens.shape()) + " do not match [" +
                            std::to_string(config_.tokens()) + "×" +
                            std::to_string(config_.embed_dim) + "]");
    }
    Tensor x = tokens;
    for (const EncoderBlock& block : blocks_) x = block(x);
    return x;
}

TransformerFeatures Model::decode(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(0) != config_.tokens() || z.dim(1) != config_.embed_dim) {
        throw ShapeMismatch("decode: tokens " + to_string(z.shape()) + " do not match [" +
                            std::to_string(config_.tokens()) + "×" +
                            std::to_string(config_.embed_dim) + "]");
    }
    TransformerFeatures out;
    out.z = z;
    const Tensor grid =
        reshape(transpose(z), {config_.embed_dim, config_.grid_h(), config_.grid_w()});
    // The token grid sits at H/patch; one bilinear stage per scale from there.
    const Tensor base = upsample_bilinear(grid, config_.patch / 8);
    out.t0 = relu(decoder_convs_[0](base));
    out.t1 = relu(decoder_convs_[1](upsample_bilinear(out.t0, 2)));
    out.t2 = relu(decoder_convs_[2](upsample_bilinear(out.t1, 2)));
    return out;
}

CnnFeatures Model::cnn_branch(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != config_.height ||
        image.dim(2) != config_.width) {
        throw ShapeMismatch("cnn_branch: image " + to_string(image.shape()) + " does not match [3×" +
                            std::to_string(config_.height) + "×" + std::to_string(config_.width) + "]");
    }
    CnnFeatures out;
    out.v2 = cnn_blocks_[0](image);
    out.v1 = cnn_blocks_[1](out.v2);
    out.v0 = cnn_blocks_[2](out.v1);
    return out;
}

Tensor Model::bifuse(const Tensor& t, const Tensor& v, int scale) const {
    return fusion_stage(scale)(t, v);
}

Tensor Model::predict(const FusionMaps& fusion) const {
    const std::int64_t h8 = config_.height / 8, w8 = config_.width / 8;
    const auto check = [&](const Tensor& f, std::int64_t factor, const char* which) {
        if (f.rank() != 3 || f.dim(1) != h8 * factor || f.dim(2) != w8 * factor) {
            throw ShapeMismatch(std::string("predict: ") + which + " has shape " +
                                to_string(f.shape()) + ", expected spatial " +
                                std::to_string(h8 * factor) + "×" + std::to_string(w8 * factor));
        }
    };
    check(fusion.f0, 1, "f0");
    check(fusion.f1, 2, "f1");
    check(fusion.f2, 4, "f2");

    Tensor x = relu(head_p0_(fusion.f0));
    x = upsample_bilinear(x, 2);
    x = relu(head_m1_(concat_channels(std::array<Tensor, 2>{x, fusion.f1})));
    x = upsample_bilinear(x, 2);
    x = relu(head_m2_(concat_channels(std::array<Tensor, 2>{x, fusion.f2})));
    x = upsample_bilinear(x, 2);
    return head_out_(x);
}

ForwardResult Model::forward(const Tensor& image) const {
    const Tensor tokens = patch_embed(image);
    const Tensor z = encode(tokens);
    const TransformerFeatures tf = decode(z);
    const CnnFeatures cf = cnn_branch(image);

    ForwardResult out;
    out.fusion.f0 = bifuse(tf.t0, cf.v0, 0);
    out.fusion.f1 = bifuse(tf.t1, cf.v1, 1);
    out.fusion.f2 = bifuse(tf.t2, cf.v2, 2);
    out.logits = predict(out.fusion);
    out.aux_logits = {aux_heads_[0](out.fusion.f0), aux_heads_[1](out.fusion.f1),
                      aux_heads_[2](out.fusion.f2)};
    return out;
}

// -- checkpoint io -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    // Host is little-endian on every platform this project targets; the
    // format is defined little-endian regardless.
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint " + path + " for writing");

    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kVersion);
    const std::string config = serialize(model.config());
    write_le<std::uint64_t>(out, config.size());
    out.write(config.data(), static_cast<std::streamsize>(config.size()));

    const auto params = model.parameters();
    write_le<std::uint64_t>(out, params.size());
    for (const NamedParam& p : params) {
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::int64_t d : p.tensor.shape()) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        for (double v : p.tensor.values()) write_le<double>(out, v);
    }
    if (!out) throw IoError("failed writing checkpoint " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointMismatch(path + " is not a checkpoint file");
    }
    const auto version = read_le<std::uint32_t>(in);
    if (version != kVersion) {
        throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(version));
    }
    const auto config_len = read_le<std::uint64_t>(in);
    std::string config_text(config_len, '\0');
    in.read(config_text.data(), static_cast<std::streamsize>(config_len));
    if (!in) throw CheckpointMismatch("truncated checkpoint config block");
    ModelConfig config;
    try {
        config = parse_model_config(config_text);
    } catch (const DecodeError& e) {
        throw CheckpointMismatch(std::string("bad checkpoint config: ") + e.what());
    } catch (const InvalidParam& e) {
        throw CheckpointMismatch(std::string("bad checkpoint config: ") + e.what());
    }

    Model model(config);
    std::map<std::string, Tensor> by_name;
    for (const NamedParam& p : model.parameters()) by_name.emplace(p.name, p.tensor);

    const auto count = read_le<std::uint64_t>(in);
    if (count != by_name.size()) {
        throw CheckpointMismatch("checkpoint has " + std::to_string(count) + " parameters, model needs " +
                                 std::to_string(by_name.size()));
    }
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = read_le<std::uint32_t>(in);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::int64_t>(read_le<std::uint64_t>(in));
        if (!in) throw CheckpointMismatch("truncated checkpoint at parameter " + std::to_string(i));
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointMismatch("unexpected parameter '" + name + "'");
        if (it->second.shape() != shape) {
            throw CheckpointMismatch("parameter '" + name + "' has shape " + to_string(shape) +
                                     ", model expects " + to_string(it->second.shape()));
        }
        for (double& v : it->second.values()) v = read_le<double>(in);
        if (!in) throw CheckpointMismatch("truncated checkpoint data for '" + name + "'");
    }
    return model;
}

}  // namespace floodseg
