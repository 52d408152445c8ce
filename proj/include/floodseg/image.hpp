#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace floodseg {

/// Interleaved 8-bit raster, row-major; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 0;
    std::vector<std::uint8_t> pixels;

    ImageU8() = default;
    ImageU8(std::int64_t h, std::int64_t w, std::int64_t c);

    std::uint8_t at(std::int64_t y, std::int64_t x, std::int64_t c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t& at(std::int64_t y, std::int64_t x, std::int64_t c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

/// Decodes a PNG to 8-bit gray or RGB (palette expanded, 16-bit narrowed,
/// alpha stripped). Throws IoError if unreadable, DecodeError if not a PNG.
ImageU8 read_png(const std::string& path);

/// Encodes as grayscale (channels 1) or RGB (channels 3) PNG.
void write_png(const std::string& path, const ImageU8& image);

/// Bilinear resize per channel, align_corners=false coordinates.
ImageU8 resize_bilinear(const ImageU8& image, std::int64_t out_h, std::int64_t out_w);

/// Nearest-neighbor resize: source index floor((o+0.5)*in/out), clamped.
ImageU8 resize_nearest(const ImageU8& image, std::int64_t out_h, std::int64_t out_w);

}  // namespace floodseg
