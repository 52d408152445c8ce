#include "floodseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "floodseg/errors.hpp"
#include "floodseg/image.hpp"

namespace floodseg {

std::string to_string(Split split) {
    return split == Split::train ? "train" : "test";
}

Split split_from_string(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "test") return Split::test;
    throw DecodeError("unknown split label '" + text + "'");
}

std::int64_t DatasetManifest::count(Split split) const {
    std::int64_t n = 0;
    for (const ManifestEntry& e : entries) n += (e.split == split);
    return n;
}

std::vector<ManifestEntry> DatasetManifest::subset(Split split) const {
    std::vector<ManifestEntry> out;
    for (const ManifestEntry& e : entries) {
        if (e.split == split) out.push_back(e);
    }
    return out;
}

void DatasetManifest::validate() const {
    std::unordered_set<std::string> seen;
    for (const ManifestEntry& e : entries) {
        if (e.id.empty()) throw InvalidParam("manifest entry with empty id");
        if (!seen.insert(e.id).second) throw DuplicateId("duplicate id '" + e.id + "'");
        if (e.image_path.empty() || e.mask_path.empty()) {
            throw InvalidParam("manifest entry '" + e.id + "' has an empty path");
        }
    }
}

DatasetManifest make_split(std::span<const PairedPaths> items, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidParam("split ratio must lie in (0,1)");
    {
        std::unordered_set<std::string> seen;
        for (const PairedPaths& p : items) {
            if (!seen.insert(p.id).second) throw DuplicateId("duplicate id '" + p.id + "'");
        }
    }
    const std::int64_t n = static_cast<std::int64_t>(items.size());

    // Fisher-Yates with explicit draws so the assignment is stable across
    // standard-library implementations.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    // ceil((1-ratio)*n), reading near-integer products as exact so a decimal
    // ratio like 0.1 on n=100 gives precisely 90.
    const double t = (1.0 - ratio) * static_cast<double>(n);
    const double r = std::round(t);
    const std::int64_t train_count = std::abs(t - r) < 1e-9 * static_cast<double>(std::max<std::int64_t>(n, 1))
                                         ? static_cast<std::int64_t>(r)
                                         : static_cast<std::int64_t>(std::ceil(t));

    std::vector<Split> assignment(static_cast<std::size_t>(n), Split::train);
    for (std::int64_t k = train_count; k < n; ++k) {
        assignment[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = Split::test;
    }

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.ratio = ratio;
    manifest.entries.reserve(items.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const PairedPaths& p = items[static_cast<std::size_t>(i)];
        manifest.entries.push_back(
            {p.id, p.image_path, p.mask_path, assignment[static_cast<std::size_t>(i)]});
    }
    manifest.validate();
    return manifest;
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
    std::ostringstream header;
    header << "seed=" << manifest.seed << "\tratio=";
    header.precision(6);
    header << std::fixed << manifest.ratio;
    out << header.str() << '\n';
    for (const ManifestEntry& e : manifest.entries) {
        out << e.id << '\t' << e.image_path << '\t' << e.mask_path << '\t' << to_string(e.split)
            << '\n';
    }
}

void write_manifest_file(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open manifest " + path + " for writing");
    write_manifest(out, manifest);
    if (!out) throw IoError("failed writing manifest " + path);
}

DatasetManifest read_manifest(std::istream& in) {
    DatasetManifest manifest;
    std::string line;
    if (!std::getline(in, line)) throw DecodeError("manifest is empty");
    {
        std::istringstream header(line);
        std::string field;
        bool saw_seed = false, saw_ratio = false;
        while (std::getline(header, field, '\t')) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw DecodeError("malformed manifest header: " + line);
            const std::string key = field.substr(0, eq);
            const std::string value = field.substr(eq + 1);
            if (key == "seed") {
                manifest.seed = std::stoull(value);
                saw_seed = true;
            } else if (key == "ratio") {
                manifest.ratio = std::stod(value);
                saw_ratio = true;
            }
        }
        if (!saw_seed || !saw_ratio) throw DecodeError("manifest header missing seed/ratio: " + line);
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        ManifestEntry e;
        std::string split;
        if (!std::getline(row, e.id, '\t') || !std::getline(row, e.image_path, '\t') ||
            !std::getline(row, e.mask_path, '\t') || !std::getline(row, split)) {
            throw DecodeError("malformed manifest line: " + line);
        }
        e.split = split_from_string(split);
        manifest.entries.push_back(std::move(e));
    }
    manifest.validate();
    return manifest;
}

DatasetManifest read_manifest_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    return read_manifest(in);
}

Sample load_sample(const ManifestEntry& entry, std::int64_t target_h, std::int64_t target_w) {
    ImageU8 image = read_png(entry.image_path);
    ImageU8 mask = read_png(entry.mask_path);

    if (image.channels == 1) {
        ImageU8 rgb(image.height, image.width, 3);
        for (std::int64_t y = 0; y < image.height; ++y)
            for (std::int64_t x = 0; x < image.width; ++x)
                for (std::int64_t c = 0; c < 3; ++c) rgb.at(y, x, c) = image.at(y, x, 0);
        image = std::move(rgb);
    }
    image = resize_bilinear(image, target_h, target_w);
    mask = resize_nearest(mask, target_h, target_w);

    Sample sample;
    sample.id = entry.id;
    Tensor img = Tensor::zeros({3, target_h, target_w});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < target_h; ++y)
            for (std::int64_t x = 0; x < target_w; ++x)
                img.data()[(c * target_h + y) * target_w + x] =
                    static_cast<double>(image.at(y, x, c)) / 255.0;
    sample.image = img;

    sample.mask = BinaryMask(target_h, target_w);
    for (std::int64_t y = 0; y < target_h; ++y)
        for (std::int64_t x = 0; x < target_w; ++x)
            sample.mask.at(y, x) = mask.at(y, x, 0) >= 128 ? 1 : 0;

    for (double v : sample.image.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DecodeError(entry.id + ": image value outside [0,1]");
    }
    sample.mask.validate();
    return sample;
}

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split, std::int64_t target_h,
                               std::int64_t target_w) {
    std::vector<Sample> samples;
    for (const ManifestEntry& e : manifest.entries) {
        if (e.split == split) samples.push_back(load_sample(e, target_h, target_w));
    }
    return samples;
}

// -- synthetic scenes --------------------------------------------------------

bool SceneBlob::contains(double y, double x) const {
    const double dy = y - center_y, dx = x - center_x;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / radius_x;
    const double v = (-dx * s + dy * c) / radius_y;
    const double r = std::hypot(u, v);
    const double phi = std::atan2(v, u);
    const double boundary = 1.0 + wobble_amp2 * std::sin(2.0 * phi + wobble_phase2) +
                            wobble_amp3 * std::sin(3.0 * phi + wobble_phase3);
    return r <= boundary;
}

namespace {

// Value noise: bilinear interpolation of a seeded lattice, values in [0,1].
struct NoiseField {
    std::int64_t grid_h, grid_w;
    double spacing;
    std::vector<double> lattice;

    NoiseField(std::mt19937_64& rng, std::int64_t height, std::int64_t width, double spacing_px)
        : grid_h(static_cast<std::int64_t>(std::floor(height / spacing_px)) + 2),
          grid_w(static_cast<std::int64_t>(std::floor(width / spacing_px)) + 2),
          spacing(spacing_px),
          lattice(static_cast<std::size_t>(grid_h * grid_w)) {
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        for (double& v : lattice) v = uniform(rng);
    }

    double at(double y, double x) const {
        const double gy = y / spacing, gx = x / spacing;
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(gy), grid_h - 2);
        const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(gx), grid_w - 2);
        const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
        const double v00 = lattice[static_cast<std::size_t>(y0 * grid_w + x0)];
        const double v01 = lattice[static_cast<std::size_t>(y0 * grid_w + x0 + 1)];
        const double v10 = lattice[static_cast<std::size_t>((y0 + 1) * grid_w + x0)];
        const double v11 = lattice[static_cast<std::size_t>((y0 + 1) * grid_w + x0 + 1)];
        return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
};

struct Rgb {
    double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

constexpr Rgb kSoil{0.44, 0.34, 0.20};
constexpr Rgb kGrass{0.30, 0.44, 0.22};
constexpr Rgb kDeepWater{0.10, 0.22, 0.46};
constexpr Rgb kShallowWater{0.22, 0.40, 0.62};

}  // namespace

Sample render_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                    std::span<const SceneBlob> blobs, std::string id) {
    if (height <= 0 || width <= 0) throw InvalidParam("scene size must be positive");

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    NoiseField land_noise(rng, height, width, 7.0);
    NoiseField water_noise(rng, height, width, 5.0);
    std::uniform_real_distribution<double> ripple_dir(0.0, std::numbers::pi);
    const double ripple_angle = ripple_dir(rng);
    const double ripple_ky = std::sin(ripple_angle) * 2.0 * std::numbers::pi / 9.0;
    const double ripple_kx = std::cos(ripple_angle) * 2.0 * std::numbers::pi / 9.0;
    std::uniform_real_distribution<double> jitter(-0.02, 0.02);

    Sample sample;
    sample.id = std::move(id);
    sample.mask = BinaryMask(height, width);
    Tensor image = Tensor::zeros({3, height, width});

    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
            bool water = false;
            for (const SceneBlob& blob : blobs) {
                if (blob.contains(static_cast<double>(y), static_cast<double>(x))) {
                    water = true;
                    break;
                }
            }
            sample.mask.at(y, x) = water ? 1 : 0;

            const double yd = static_cast<double>(y), xd = static_cast<double>(x);
            Rgb color;
            if (water) {
                const double ripple =
                    0.5 + 0.5 * std::sin(ripple_ky * yd + ripple_kx * xd +
                                         4.0 * water_noise.at(yd, xd));
                color = mix(kDeepWater, kShallowWater, ripple);
            } else {
                color = mix(kSoil, kGrass, land_noise.at(yd, xd));
            }
            const double j = jitter(rng);
            const std::int64_t p = y * width + x;
            image.data()[0 * height * width + p] = std::clamp(color.r + j, 0.0, 1.0);
            image.data()[1 * height * width + p] = std::clamp(color.g + j, 0.0, 1.0);
            image.data()[2 * height * width + p] = std::clamp(color.b + j, 0.0, 1.0);
        }
    }
    sample.image = image;
    return sample;
}

Sample synthesize_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                        std::int64_t n_blobs, std::string id) {
    if (height <= 0 || width <= 0) throw InvalidParam("scene size must be positive");
    if (n_blobs < 0) throw InvalidParam("n_blobs must be non-negative");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> center(0.18, 0.82);
    std::uniform_real_distribution<double> radius(0.14, 0.30);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::uniform_real_distribution<double> amp2(0.0, 0.22);
    std::uniform_real_distribution<double> amp3(0.0, 0.12);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

    std::vector<SceneBlob> blobs(static_cast<std::size_t>(n_blobs));
    for (SceneBlob& blob : blobs) {
        blob.center_y = center(rng) * static_cast<double>(height);
        blob.center_x = center(rng) * static_cast<double>(width);
        blob.radius_y = radius(rng) * static_cast<double>(height);
        blob.radius_x = radius(rng) * static_cast<double>(width);
        blob.angle = angle(rng);
        blob.wobble_amp2 = amp2(rng);
        blob.wobble_phase2 = phase(rng);
        blob.wobble_amp3 = amp3(rng);
        blob.wobble_phase3 = phase(rng);
    }
    return render_scene(rng(), height, width, blobs, std::move(id));
}

Sample flip_horizontal(const Sample& sample) {
    const std::int64_t h = sample.mask.height, w = sample.mask.width;
    Sample out;
    out.id = sample.id;
    out.mask = BinaryMask(h, w);
    Tensor image = Tensor::zeros(sample.image.shape());
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            out.mask.at(y, x) = sample.mask.at(y, w - 1 - x);
            for (std::int64_t c = 0; c < 3; ++c)
                image.data()[(c * h + y) * w + x] =
                    sample.image.data()[(c * h + y) * w + (w - 1 - x)];
        }
    out.image = image;
    return out;
}

Sample flip_vertical(const Sample& sample) {
    const std::int64_t h = sample.mask.height, w = sample.mask.width;
    Sample out;
    out.id = sample.id;
    out.mask = BinaryMask(h, w);
    Tensor image = Tensor::zeros(sample.image.shape());
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            out.mask.at(y, x) = sample.mask.at(h - 1 - y, x);
            for (std::int64_t c = 0; c < 3; ++c)
                image.data()[(c * h + y) * w + x] =
                    sample.image.data()[(c * h + (h - 1 - y)) * w + x];
        }
    out.image = image;
    return out;
}

Sample augment(const Sample& sample, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const bool horizontal = (rng() & 1) != 0;
    const bool vertical = (rng() & 1) != 0;
    Sample out = sample;
    if (horizontal) out = flip_horizontal(out);
    if (vertical) out = flip_vertical(out);
    return out;
}

void write_sample_pngs(const Sample& sample, const std::string& image_path,
                       const std::string& mask_path) {
    const std::int64_t h = sample.mask.height, w = sample.mask.width;
    ImageU8 image(h, w, 3);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = sample.image.data()[(c * h + y) * w + x];
                image.at(y, x, c) =
                    static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
    write_png(image_path, image);

    ImageU8 mask(h, w, 1);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) mask.at(y, x, 0) = sample.mask.at(y, x) ? 255 : 0;
    write_png(mask_path, mask);
}

}  // namespace floodseg
