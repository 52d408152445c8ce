#include "floodseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "floodseg/errors.hpp"

namespace floodseg {

ImageU8::ImageU8(std::int64_t h, std::int64_t w, std::int64_t c)
    : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), 0) {
    if (h <= 0 || w <= 0 || (c != 1 && c != 3)) {
        throw InvalidParam("image must be non-empty with 1 or 3 channels");
    }
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::string& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw IoError("cannot open " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
        throw DecodeError(path + " is not a PNG file");
    }

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DecodeError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DecodeError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows;
    ImageU8 out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("failed to decode " + path);
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError(path + ": unsupported channel count " + std::to_string(channels));
    }

    out = ImageU8(static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), channels);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) {
        rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * w * static_cast<std::size_t>(channels);
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw InvalidParam("write_png: channels must be 1 or 3");
    }
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw IoError("cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to write " + path);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8,
                 image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
    for (std::int64_t y = 0; y < image.height; ++y) {
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
            image.pixels.data() + static_cast<std::size_t>(y * image.width * image.channels));
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 resize_bilinear(const ImageU8& image, std::int64_t out_h, std::int64_t out_w) {
    if (out_h <= 0 || out_w <= 0) throw InvalidParam("resize target must be positive");
    ImageU8 out(out_h, out_w, image.channels);
    const double sy = static_cast<double>(image.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(image.width) / static_cast<double>(out_w);
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const double src_y = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        const double fy = std::floor(src_y);
        const std::int64_t y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fy), 0, image.height - 1);
        const std::int64_t y1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fy) + 1, 0, image.height - 1);
        const double wy1 = src_y - fy, wy0 = 1.0 - wy1;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const double src_x = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            const double fx = std::floor(src_x);
            const std::int64_t x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fx), 0, image.width - 1);
            const std::int64_t x1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(fx) + 1, 0, image.width - 1);
            const double wx1 = src_x - fx, wx0 = 1.0 - wx1;
            for (std::int64_t c = 0; c < image.channels; ++c) {
                const double v = wy0 * (wx0 * image.at(y0, x0, c) + wx1 * image.at(y0, x1, c)) +
                                 wy1 * (wx0 * image.at(y1, x0, c) + wx1 * image.at(y1, x1, c));
                out.at(oy, ox, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

ImageU8 resize_nearest(const ImageU8& image, std::int64_t out_h, std::int64_t out_w) {
    if (out_h <= 0 || out_w <= 0) throw InvalidParam("resize target must be positive");
    ImageU8 out(out_h, out_w, image.channels);
    const double sy = static_cast<double>(image.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(image.width) / static_cast<double>(out_w);
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const std::int64_t iy = std::min<std::int64_t>(
            image.height - 1,
            static_cast<std::int64_t>(std::floor((static_cast<double>(oy) + 0.5) * sy)));
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const std::int64_t ix = std::min<std::int64_t>(
                image.width - 1,
                static_cast<std::int64_t>(std::floor((static_cast<double>(ox) + 0.5) * sx)));
            for (std::int64_t c = 0; c < image.channels; ++c) out.at(oy, ox, c) = image.at(iy, ix, c);
        }
    }
    return out;
}

}  // namespace floodseg
