#include "bda/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "bda/error.hpp"

namespace bda::plot {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr std::array<Rgb, 6> kSeriesColors{{{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14},
                                           {148, 103, 189}, {140, 86, 75}}};

void put(io::Raster& r, long x, long y, Rgb c) {
    if (x < 0 || y < 0 || x >= long(r.width) || y >= long(r.height)) return;
    std::copy(c.begin(), c.end(), r.pixels.begin() + (std::size_t(y) * r.width + std::size_t(x)) * 3);
}

void line(io::Raster& r, long x0, long y0, long x1, long y1, Rgb c) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
        put(r, x0, y0, c);
        put(r, x0, y0 + 1, c);
        if (x0 == x1 && y0 == y1) break;
        const long e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

io::Raster line_chart(const std::vector<std::vector<double>>& series, std::size_t width, std::size_t height) {
    io::Raster r{width, height, 3, std::vector<std::uint8_t>(width * height * 3, 255)};
    const long left = 40, right = long(width) - 12, top = 12, bottom = long(height) - 30;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t longest = 0;
    for (const auto& s : series) {
        longest = std::max(longest, s.size());
        for (double v : s)
            if (std::isfinite(v)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
    }
    const Rgb frame{90, 90, 90}, grid{225, 225, 225};
    for (int g = 1; g < 4; ++g) {
        const long y = top + (bottom - top) * g / 4;
        line(r, left, y, right, y, grid);
    }
    line(r, left, top, right, top, frame);
    line(r, left, bottom, right, bottom, frame);
    line(r, left, top, left, bottom, frame);
    line(r, right, top, right, bottom, frame);
    if (!std::isfinite(lo)) return r;
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    auto px = [&](std::size_t i) {
        return longest <= 1 ? (left + right) / 2 : left + long(std::lround(double(i) * double(right - left) / double(longest - 1)));
    };
    auto py = [&](double v) { return bottom - long(std::lround((v - lo) / (hi - lo) * double(bottom - top))); };
    for (std::size_t k = 0; k < series.size(); ++k) {
        const Rgb c = kSeriesColors[k % kSeriesColors.size()];
        const auto& s = series[k];
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!std::isfinite(s[i])) continue;
            if (i + 1 < s.size() && std::isfinite(s[i + 1])) {
                line(r, px(i), py(s[i]), px(i + 1), py(s[i + 1]), c);
            } else {
                line(r, px(i) - 1, py(s[i]), px(i) + 1, py(s[i]), c);
            }
        }
    }
    return r;
}

void write_line_chart(const std::filesystem::path& path, const std::vector<std::vector<double>>& series) {
    io::write_png(path, line_chart(series));
}

Tensor colorize_heatmap(const Tensor& heat) {
    if (heat.rank() != 3 || heat.dim(0) != 1) throw ShapeError("heatmap must be (1, H, W)");
    const std::size_t h = heat.dim(1), w = heat.dim(2);
    Tensor out({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double v = std::clamp(heat.at(0, y, x), 0.0, 1.0);
            out.at(0, y, x) = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
            out.at(1, y, x) = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
            out.at(2, y, x) = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
        }
    return out;
}

Tensor colorize_mask(const DamageMask& mask) {
    static constexpr double kPalette[kNumClasses][3] = {
        {0.0, 0.0, 0.0}, {0.2, 0.8, 0.2}, {1.0, 0.9, 0.2}, {1.0, 0.5, 0.0}, {0.9, 0.1, 0.1}};
    mask.validate();
    Tensor out({3, mask.height, mask.width});
    for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = kPalette[mask.at(y, x)][c];
    return out;
}

Tensor hstack(const std::vector<Tensor>& tiles) {
    if (tiles.empty()) throw ShapeError("nothing to stack");
    const Shape& s = tiles.front().shape();
    for (const auto& t : tiles)
        if (t.shape() != s || s.size() != 3) throw ShapeError("tiles must share one (C, H, W) shape");
    const std::size_t c = s[0], h = s[1], w = s[2];
    Tensor out({c, h, w * tiles.size()});
    for (std::size_t k = 0; k < tiles.size(); ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out.at(ch, y, k * w + x) = tiles[k].at(ch, y, x);
    return out;
}

}  // namespace bda::plot
