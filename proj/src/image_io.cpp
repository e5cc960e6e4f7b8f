#include "bda/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <string>
#include <memory>

#include "bda/error.hpp"

namespace bda::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
    File f(std::fopen(path.c_str(), mode));
    if (!f) throw DataError("cannot open " + path.string());
    return f;
}

// libpng reports errors by longjmp; the message is parked here and turned
// into an exception once control is back in C++ frames.
thread_local std::string t_png_error;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    t_png_error = msg;
    png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Raster read_png(const std::filesystem::path& path) {
    File f = open(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw DataError(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    Raster r;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(path.string() + ": " + t_png_error);
    }
    {
        png_init_io(png, f.get());
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        const auto color = png_get_color_type(png, info);
        if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
        png_read_update_info(png, info);

        r.width = png_get_image_width(png, info);
        r.height = png_get_image_height(png, info);
        r.channels = png_get_channels(png, info);
        if (r.channels != 3) {
            png_destroy_read_struct(&png, &info, nullptr);
            throw DataError(path.string() + ": unsupported PNG channel layout");
        }
        r.pixels.resize(r.width * r.height * 3);
        rows.resize(r.height);
        for (std::size_t y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + y * r.width * 3;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
    if (raster.channels != 1 && raster.channels != 3) throw DataError("PNG output needs 1 or 3 channels");
    if (raster.pixels.size() != raster.width * raster.height * raster.channels) {
        throw DataError("raster size does not match its dimensions");
    }
    File f = open(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    std::vector<png_const_bytep> rows(raster.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError(path.string() + ": " + t_png_error);
    }
    {
        png_init_io(png, f.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(raster.width), static_cast<png_uint_32>(raster.height), 8,
                     raster.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t y = 0; y < raster.height; ++y)
            rows[y] = raster.pixels.data() + y * raster.width * raster.channels;
        png_write_image(png, const_cast<png_bytepp>(rows.data()));
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, &info);
}

Raster to_raster(const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
        throw ShapeError("expected a (3, H, W) or (1, H, W) image, got " + shape_str(image.shape()));
    }
    Raster r{image.dim(2), image.dim(1), image.dim(0), {}};
    r.pixels.resize(image.size());
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t c = 0; c < r.channels; ++c)
                r.pixels[(y * r.width + x) * r.channels + c] = to_byte(image.at(c, y, x));
    return r;
}

Tensor to_tensor(const Raster& raster) {
    Tensor t({raster.channels, raster.height, raster.width});
    for (std::size_t y = 0; y < raster.height; ++y)
        for (std::size_t x = 0; x < raster.width; ++x)
            for (std::size_t c = 0; c < raster.channels; ++c)
                t.at(c, y, x) = raster.pixels[(y * raster.width + x) * raster.channels + c] / 255.0;
    return t;
}

Tensor read_image(const std::filesystem::path& path) { return to_tensor(read_png(path)); }

void write_image(const std::filesystem::path& path, const Tensor& image) { write_png(path, to_raster(image)); }

Tensor quantize(const Tensor& image) {
    Tensor out = image;
    for (auto& v : out.values()) v = to_byte(v) / 255.0;
    return out;
}

}  // namespace bda::io
