#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bda/tensor.hpp"

namespace bda::io {

// 8-bit raster, interleaved channels.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 or 3
    std::vector<std::uint8_t> pixels;
};

// Reads any PNG as 8-bit RGB (palette, gray and alpha are converted).
Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& raster);

// (3, H, W) in [0, 1] <-> RGB raster; values are clamped and rounded to k/255.
Raster to_raster(const Tensor& image);
Tensor to_tensor(const Raster& raster);

Tensor read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Tensor& image);

// Rounds every value to the nearest k/255 after clamping to [0, 1].
Tensor quantize(const Tensor& image);

}  // namespace bda::io
