#pragma once

#include <filesystem>
#include <vector>

#include "bda/image_io.hpp"
#include "bda/scene.hpp"
#include "bda/tensor.hpp"

namespace bda::plot {

// Line chart of one or more series against their index, autoscaled, on a
// white canvas with a plain frame. NaN points break the line.
io::Raster line_chart(const std::vector<std::vector<double>>& series, std::size_t width = 480,
                      std::size_t height = 320);
void write_line_chart(const std::filesystem::path& path, const std::vector<std::vector<double>>& series);

// (1, H, W) values in [0, 1] -> RGB through a blue-to-red ramp.
Tensor colorize_heatmap(const Tensor& heat);
// Damage mask -> RGB with one fixed colour per class.
Tensor colorize_mask(const DamageMask& mask);
// Places equally sized (3, H, W) tiles side by side.
Tensor hstack(const std::vector<Tensor>& tiles);

}  // namespace bda::plot
