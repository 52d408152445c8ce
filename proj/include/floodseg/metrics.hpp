#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "floodseg/tensor.hpp"

namespace floodseg {

/// H×W grid of {0,1} labels, row-major.
struct BinaryMask {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> pixels;

    BinaryMask() = default;
    BinaryMask(std::int64_t h, std::int64_t w);
    BinaryMask(std::int64_t h, std::int64_t w, std::vector<std::uint8_t> px);

    std::int64_t count() const { return height * width; }
    std::uint8_t at(std::int64_t y, std::int64_t x) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
    std::uint8_t& at(std::int64_t y, std::int64_t x) { return pixels[static_cast<std::size_t>(y * width + x)]; }

    /// Checks the {0,1} value set and the pixel-count invariant.
    void validate() const;
};

BinaryMask complement(const BinaryMask& mask);
BinaryMask transpose(const BinaryMask& mask);

struct IouResult {
    double iou_water = 0.0;
    double iou_background = 0.0;
    double miou = 0.0;
};

struct ImageMetrics {
    std::string id;
    double fc = 0.0;
    double iou_water = 0.0;
    double iou_background = 0.0;
    double miou = 0.0;
    double pa = 0.0;
};

struct Aggregate {
    double miou_mean = 0.0;
    double miou_std = 0.0;
    double pa_mean = 0.0;
    double pa_std = 0.0;
};

struct FloodReport {
    std::vector<ImageMetrics> per_image;
    Aggregate aggregate;
};

/// Fraction of pixels labeled 1 (water). Throws EmptyMask on zero pixels.
double flood_capacity(const BinaryMask& mask);

/// Per-class intersection-over-union and their unweighted mean. A class
/// absent from both masks contributes IoU 1.
IouResult miou(const BinaryMask& pred, const BinaryMask& truth);

/// Fraction of pixels where pred == truth.
double pixel_accuracy(const BinaryMask& pred, const BinaryMask& truth);

/// Thresholds a [1×H×W] probability map; pixel is 1 iff p >= threshold.
BinaryMask binarize(const Tensor& probabilities, double threshold = 0.5);

/// Constant [1×H×W] tensor view of a mask (no gradient).
Tensor to_tensor(const BinaryMask& mask);

/// Mean and population standard deviation over per-image entries.
FloodReport aggregate(std::vector<ImageMetrics> per_image);

/// Report file: one tab-separated record per image with 6 fractional digits,
/// then a final line prefixed AGGREGATE.
void write_report(std::ostream& out, const FloodReport& report);
void write_report_file(const std::string& path, const FloodReport& report);
FloodReport read_report(std::istream& in);

}  // namespace floodseg
