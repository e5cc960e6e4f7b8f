#include <cmath>

#include "bda/error.hpp"
#include "bda/plot.hpp"
#include "doctest.h"

using namespace bda;

TEST_CASE("line chart draws on a white canvas and tolerates NaN") {
    auto r = plot::line_chart({{1.0, 2.0, 3.0, std::nan(""), 2.0}, {0.5, 0.5, 0.5, 0.5, 0.5}}, 120, 80);
    CHECK(r.width == 120);
    CHECK(r.height == 80);
    CHECK(r.channels == 3);
    std::size_t white = 0, other = 0;
    for (std::size_t i = 0; i < r.pixels.size(); i += 3) {
        (r.pixels[i] == 255 && r.pixels[i + 1] == 255 && r.pixels[i + 2] == 255 ? white : other)++;
    }
    CHECK(white > other);
    CHECK(other > 0);
    // Constant and empty series must not divide by zero.
    CHECK_NOTHROW(plot::line_chart({{1.0, 1.0}}, 40, 30));
    CHECK_NOTHROW(plot::line_chart({{}}, 40, 30));
}

TEST_CASE("heatmap ramp and mask palette") {
    Tensor heat({1, 1, 2});
    heat[0] = 0.0;
    heat[1] = 1.0;
    auto rgb = plot::colorize_heatmap(heat);
    CHECK(rgb.shape() == Shape{3, 1, 2});
    CHECK(rgb[2 * 2 + 0] > rgb[0 * 2 + 0]);  // blue at 0
    CHECK(rgb[0 * 2 + 1] > rgb[2 * 2 + 1]);  // red at 1

    DamageMask m(1, 5);
    for (std::uint8_t c = 0; c < 5; ++c) m.labels[c] = c;
    auto pal = plot::colorize_mask(m);
    for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = a + 1; b < 5; ++b) {
            bool differs = false;
            for (std::size_t ch = 0; ch < 3; ++ch) differs = differs || pal[ch * 5 + a] != pal[ch * 5 + b];
            CHECK(differs);
        }

    auto row = plot::hstack({Tensor({3, 2, 2}, 0.0), Tensor({3, 2, 2}, 1.0)});
    CHECK(row.shape() == Shape{3, 2, 4});
    CHECK(row[1] == 0.0);
    CHECK(row[2] == 1.0);
    CHECK_THROWS(plot::hstack({Tensor({3, 2, 2}), Tensor({3, 3, 2})}));
}
