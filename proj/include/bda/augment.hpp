#pragma once

#include <cstdint>
#include <utility>

#include "bda/rng.hpp"
#include "bda/tensor.hpp"

namespace bda::augment {

struct AugmentConfig {
    double crop_scale_min = 0.5;   // fraction of the source area kept by the crop
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;        // horizontal and vertical, drawn independently
    double jitter_strength = 0.4;  // max relative brightness / contrast change
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 1.0;
    std::size_t output_size = 64;

    void validate() const;
};

// The random choices behind one view.
struct ViewParams {
    std::size_t crop_y = 0, crop_x = 0, crop_side = 0;
    bool hflip = false;
    bool vflip = false;
    double brightness = 1.0;
    double contrast = 1.0;
    bool blur = false;
    double blur_sigma = 0.0;
};

ViewParams draw_view_params(const AugmentConfig& config, std::size_t height, std::size_t width, Rng& rng);
Tensor apply_view(const Tensor& image, const ViewParams& view, const AugmentConfig& config);

// Two independently sampled views (aug1(x), aug2(x)). Each view draws from its
// own sub-stream of seed, so the pair is reproducible from (image, seed).
std::pair<Tensor, Tensor> make_views(const Tensor& image, const AugmentConfig& config, std::uint64_t seed);

// Per-sample seed under the prefetch-safe scheme: global seed xor sample index.
constexpr std::uint64_t sample_seed(std::uint64_t global_seed, std::uint64_t sample_index) {
    return global_seed ^ sample_index;
}

}  // namespace bda::augment
