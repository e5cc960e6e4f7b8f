#include "bda/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bda/error.hpp"
#include "bda/kernels.hpp"

namespace bda::augment {

namespace {

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

Tensor crop_and_resize(const Tensor& image, const ViewParams& v, std::size_t out) {
    const std::size_t c = image.dim(0), w = image.dim(2), side = v.crop_side;
    Tensor crop({c, side, side});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                crop.at(ch, y, x) = image[(ch * image.dim(1) + v.crop_y + y) * w + v.crop_x + x];
    if (side == out) return crop;
    Tensor resized({c, out, out});
    kernels::upsample_bilinear(crop.data(), c, side, side, out, out, resized.data());
    return resized;
}

void flip(Tensor& img, bool horizontal) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                if (horizontal && x < w / 2) std::swap(img.at(ch, y, x), img.at(ch, y, w - 1 - x));
                if (!horizontal && y < h / 2) std::swap(img.at(ch, y, x), img.at(ch, h - 1 - y, x));
            }
}

void gaussian_blur(Tensor& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double z = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        z += kernel[i + radius];
    }
    for (auto& k : kernel) k /= z;
    const long c = static_cast<long>(img.dim(0)), h = static_cast<long>(img.dim(1)), w = static_cast<long>(img.dim(2));
    auto clampi = [](long v, long hi) { return std::clamp(v, 0L, hi - 1); };
    Tensor tmp(img.shape());
    for (long ch = 0; ch < c; ++ch)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += kernel[i + radius] * img.at(ch, y, clampi(x + i, w));
                tmp.at(ch, y, x) = s;
            }
    for (long ch = 0; ch < c; ++ch)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += kernel[i + radius] * tmp.at(ch, clampi(y + i, h), x);
                img.at(ch, y, x) = s;
            }
}

}  // namespace

void AugmentConfig::validate() const {
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
        throw ConfigError("augment crop_scale_range must satisfy 0 < min <= max <= 1");
    }
    if (!is_probability(flip_prob) || !is_probability(blur_prob)) {
        throw ConfigError("augment probabilities must lie in [0, 1]");
    }
    if (jitter_strength < 0.0 || jitter_strength >= 1.0) throw ConfigError("augment jitter_strength must lie in [0, 1)");
    if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) throw ConfigError("augment blur sigma range invalid");
    if (output_size == 0) throw ConfigError("augment output_size must be positive");
}

ViewParams draw_view_params(const AugmentConfig& config, std::size_t height, std::size_t width, Rng& rng) {
    ViewParams v;
    const double scale = rng.uniform(config.crop_scale_min, std::nextafter(config.crop_scale_max, 2.0));
    const double base = static_cast<double>(std::min(height, width));
    v.crop_side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(std::min(scale, 1.0)) * base)),
                                          1, std::min(height, width));
    v.crop_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(height - v.crop_side)));
    v.crop_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(width - v.crop_side)));
    v.hflip = rng.bernoulli(config.flip_prob);
    v.vflip = rng.bernoulli(config.flip_prob);
    v.brightness = 1.0 + rng.uniform(-config.jitter_strength, config.jitter_strength);
    v.contrast = 1.0 + rng.uniform(-config.jitter_strength, config.jitter_strength);
    v.blur = rng.bernoulli(config.blur_prob);
    v.blur_sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max);
    return v;
}

Tensor apply_view(const Tensor& image, const ViewParams& view, const AugmentConfig& config) {
    Tensor out = crop_and_resize(image, view, config.output_size);
    if (view.hflip) flip(out, true);
    if (view.vflip) flip(out, false);
    if (config.jitter_strength > 0.0) {
        double mean = 0.0;
        for (double v : out.values()) mean += v;
        mean /= static_cast<double>(out.size());
        for (auto& v : out.values()) v = ((v * view.brightness) - mean * view.brightness) * view.contrast + mean * view.brightness;
    }
    if (view.blur) gaussian_blur(out, view.blur_sigma);
    for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

std::pair<Tensor, Tensor> make_views(const Tensor& image, const AugmentConfig& config, std::uint64_t seed) {
    config.validate();
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("augment expects a (3, H, W) image");
    if (image.dim(1) < config.output_size || image.dim(2) < config.output_size) {
        throw DataError("image " + shape_str(image.shape()) + " smaller than augmentation output size " +
                        std::to_string(config.output_size));
    }
    const std::size_t h = image.dim(1), w = image.dim(2);
    Rng first(derive_seed(seed, 1));
    Rng second(derive_seed(seed, 2));
    ViewParams a = draw_view_params(config, h, w, first);
    ViewParams b = draw_view_params(config, h, w, second);
    return {apply_view(image, a, config), apply_view(image, b, config)};
}

}  // namespace bda::augment
