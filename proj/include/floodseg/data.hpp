#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "floodseg/metrics.hpp"
#include "floodseg/tensor.hpp"

namespace floodseg {

enum class Split { train, test };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

struct ManifestEntry {
    std::string id;
    std::string image_path;
    std::string mask_path;
    Split split = Split::train;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    double ratio = 0.0;
    std::vector<ManifestEntry> entries;

    std::int64_t count(Split split) const;
    std::vector<ManifestEntry> subset(Split split) const;
    /// Unique non-empty ids, non-empty paths.
    void validate() const;
};

struct PairedPaths {
    std::string id;
    std::string image_path;
    std::string mask_path;
};

/// Assigns train/test splits by a seed-keyed shuffle: the first
/// ceil((1-ratio)*n) shuffled items train, the rest test. Entry order in the
/// result follows the input order.
DatasetManifest make_split(std::span<const PairedPaths> items, double ratio, std::uint64_t seed);

/// Manifest file: a seed/ratio header line, then one tab-separated
/// id/image/mask/split record per entry.
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
void write_manifest_file(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(std::istream& in);
DatasetManifest read_manifest_file(const std::string& path);

/// One training example: RGB image in [0,1] as [3×H×W] plus its mask.
struct Sample {
    std::string id;
    Tensor image;
    BinaryMask mask;
};

/// Loads and resizes a PNG pair to the target size. Images are resized
/// bilinearly and scaled to [0,1]; masks nearest-neighbor resized, then
/// thresholded at 128 (inclusive).
Sample load_sample(const ManifestEntry& entry, std::int64_t target_h, std::int64_t target_w);

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split, std::int64_t target_h,
                               std::int64_t target_w);

/// One water region of a synthetic scene: a rotated ellipse whose boundary
/// radius is modulated by two low-order harmonics.
struct SceneBlob {
    double center_y = 0.0, center_x = 0.0;
    double radius_y = 1.0, radius_x = 1.0;
    double angle = 0.0;
    double wobble_amp2 = 0.0, wobble_phase2 = 0.0;
    double wobble_amp3 = 0.0, wobble_phase3 = 0.0;

    bool contains(double y, double x) const;
};

/// Renders a textured land/water scene; the mask is the exact union of the
/// blob supports. Deterministic in (seed, size, blobs).
Sample render_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                    std::span<const SceneBlob> blobs, std::string id = "scene");

/// Draws n_blobs random water regions and renders them.
Sample synthesize_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                        std::int64_t n_blobs, std::string id = "scene");

Sample flip_horizontal(const Sample& sample);
Sample flip_vertical(const Sample& sample);

/// Applies seed-chosen horizontal/vertical flips to image and mask together.
Sample augment(const Sample& sample, std::uint64_t seed);

/// Writes sample.image as RGB PNG (values clamped to [0,1] then quantized)
/// and sample.mask as a {0,255} grayscale PNG.
void write_sample_pngs(const Sample& sample, const std::string& image_path,
                       const std::string& mask_path);

}  // namespace floodseg
