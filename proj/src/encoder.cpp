#include "bda/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bda/error.hpp"
#include "bda/ops.hpp"

namespace bda::encoder {

namespace {

constexpr double kInitStd = 0.02;

std::string stage_name(std::size_t s) { return std::string(kPrefix) + "stage" + std::to_string(s) + "."; }
std::string block_name(std::size_t s, std::size_t b) { return stage_name(s) + "block" + std::to_string(b) + "."; }

void add_linear(ParameterSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    p.add(name + ".weight", truncated_normal({in, out}, kInitStd, rng));
    if (bias) p.add(name + ".bias", Tensor({out}, 0.0));
}

void add_norm(ParameterSet& p, const std::string& name, std::size_t width) {
    p.add(name + ".gamma", Tensor({width}, 1.0));
    p.add(name + ".beta", Tensor({width}, 0.0));
}

ag::Var norm(const ag::Var& x, const ag::VarTable& p, const std::string& name) {
    return ag::layer_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"));
}

ag::Var dense(const ag::Var& x, const ag::VarTable& p, const std::string& name) {
    const std::string bias = name + ".bias";
    return ag::linear(x, p.at(name + ".weight"), p.contains(bias) ? p.at(bias) : ag::Var());
}

std::size_t block_shift(const EncoderConfig& c, std::size_t stage, std::size_t block) {
    if (!c.shifted_windows || block % 2 == 0 || c.grid(stage) <= c.window_size) return 0;
    return c.window_size / 2;
}

}  // namespace

void EncoderConfig::validate() const {
    const std::size_t s = stage_dims.size();
    if (s < 2) throw ConfigError("encoder needs at least 2 stages");
    if (stage_depths.size() != s || num_heads.size() != s) {
        throw ConfigError("encoder stage_depths, stage_dims and num_heads must have equal length");
    }
    if (patch_size == 0 || window_size == 0) throw ConfigError("encoder patch_size and window_size must be positive");
    const std::size_t reduction = patch_size << (s - 1);
    if (input_size == 0 || input_size % reduction != 0) {
        throw ConfigError("encoder input_size " + std::to_string(input_size) + " not divisible by patch_size*2^(S-1) = " +
                          std::to_string(reduction));
    }
    for (std::size_t i = 0; i < s; ++i) {
        if (grid(i) % window_size != 0) {
            throw ConfigError("stage " + std::to_string(i) + " token grid " + std::to_string(grid(i)) +
                              " not divisible by window_size " + std::to_string(window_size));
        }
        if (stage_depths[i] == 0) throw ConfigError("stage depth must be positive");
        if (num_heads[i] == 0 || stage_dims[i] % num_heads[i] != 0) {
            throw ConfigError("stage " + std::to_string(i) + " dim not divisible by its head count");
        }
        if (i > 0 && stage_dims[i] <= stage_dims[i - 1]) throw ConfigError("stage_dims must be strictly increasing");
    }
}

ParameterSet init_params(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, 0xE4C0DE));
    ParameterSet p;
    const std::size_t patch_width = 3 * config.patch_size * config.patch_size;
    add_linear(p, std::string(kPrefix) + "patch_embed", patch_width, config.stage_dims[0], rng);
    for (std::size_t s = 0; s < config.stages(); ++s) {
        const std::size_t d = config.stage_dims[s];
        if (s > 0) {
            add_norm(p, stage_name(s) + "merge.norm", 4 * config.stage_dims[s - 1]);
            add_linear(p, stage_name(s) + "merge.reduction", 4 * config.stage_dims[s - 1], d, rng, false);
        }
        for (std::size_t b = 0; b < config.stage_depths[s]; ++b) {
            const std::string bn = block_name(s, b);
            add_norm(p, bn + "norm1", d);
            add_linear(p, bn + "attn.qkv", d, 3 * d, rng);
            add_linear(p, bn + "attn.proj", d, d, rng);
            add_norm(p, bn + "norm2", d);
            add_linear(p, bn + "mlp.fc1", d, 2 * d, rng);
            add_linear(p, bn + "mlp.fc2", 2 * d, d, rng);
        }
        add_norm(p, stage_name(s) + "out_norm", d);
    }
    return p;
}

void check_image(const Tensor& image, const EncoderConfig& config) {
    if (image.rank() != 3) throw ShapeError("image must be (channels, height, width), got " + shape_str(image.shape()));
    if (image.dim(0) != 3) throw ShapeError("image channel dimension is " + std::to_string(image.dim(0)) + ", expected 3");
    if (image.dim(1) != config.input_size) {
        throw ShapeError("image height is " + std::to_string(image.dim(1)) + ", expected " +
                         std::to_string(config.input_size));
    }
    if (image.dim(2) != config.input_size) {
        throw ShapeError("image width is " + std::to_string(image.dim(2)) + ", expected " +
                         std::to_string(config.input_size));
    }
    if (!image.all_finite()) throw NumericError("image contains non-finite values");
}

EncodeResult encode(const ag::Var& image, const EncoderConfig& config, const ag::VarTable& params) {
    check_image(image.value(), config);
    EncodeResult result;
    ag::Var x = dense(ag::patchify(image, config.patch_size), params, std::string(kPrefix) + "patch_embed");
    for (std::size_t s = 0; s < config.stages(); ++s) {
        const std::size_t grid = config.grid(s);
        if (s > 0) {
            x = ag::merge_patches(x, config.grid(s - 1));
            x = norm(x, params, stage_name(s) + "merge.norm");
            x = dense(x, params, stage_name(s) + "merge.reduction");
        }
        for (std::size_t b = 0; b < config.stage_depths[s]; ++b) {
            const std::string bn = block_name(s, b);
            const std::size_t shift = block_shift(config, s, b);
            auto geometry = ag::make_window_geometry(grid, config.window_size, shift);
            const bool last = s + 1 == config.stages() && b + 1 == config.stage_depths[s];

            std::shared_ptr<Tensor> probs;
            ag::Var h = dense(norm(x, params, bn + "norm1"), params, bn + "attn.qkv");
            h = ag::window_attention(h, geometry, config.num_heads[s], last ? &probs : nullptr);
            x = ag::add(x, dense(h, params, bn + "attn.proj"));

            h = dense(norm(x, params, bn + "norm2"), params, bn + "mlp.fc1");
            x = ag::add(x, dense(ag::gelu(h), params, bn + "mlp.fc2"));

            if (last) {
                result.final_attention.weights = probs;
                result.final_attention.grid = grid;
                result.final_attention.window = config.window_size;
                result.final_attention.token_of_slot = std::move(geometry.token_of_slot);
            }
        }
        result.maps.push_back(ag::tokens_to_map(norm(x, params, stage_name(s) + "out_norm"), grid));
    }
    return result;
}

FeaturePyramid encode(const Tensor& image, const EncoderConfig& config, const ParameterSet& params) {
    auto result = encode(ag::constant(image), config, params.bind(false));
    FeaturePyramid pyramid;
    for (const auto& m : result.maps) pyramid.maps.push_back(m.value());
    return pyramid;
}

Tensor received_attention(const AttentionMatrix& attention) {
    const Tensor& w = *attention.weights;
    const std::size_t windows = w.dim(0), heads = w.dim(1), t = w.dim(2);
    Tensor grid({attention.grid, attention.grid}, 0.0);
    for (std::size_t win = 0; win < windows; ++win)
        for (std::size_t j = 0; j < t; ++j) {
            double s = 0.0;
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < t; ++i) s += w[((win * heads + h) * t + i) * t + j];
            grid[static_cast<std::size_t>(attention.token_of_slot[win * t + j])] =
                s / static_cast<double>(heads * t);
        }
    return grid;
}

Tensor attention_rollup(const Tensor& image, const EncoderConfig& config, const ParameterSet& params) {
    auto result = encode(ag::constant(image), config, params.bind(false));
    const AttentionMatrix& att = result.final_attention;
    Tensor grid = received_attention(att).reshaped({1, att.grid, att.grid});
    Tensor heat = ag::upsample_bilinear(ag::constant(grid), config.input_size, config.input_size).value();
    const auto [lo, hi] = std::minmax_element(heat.values().begin(), heat.values().end());
    const double min = *lo, range = *hi - *lo;
    // Spreads at rounding level count as constant.
    const bool flat = !(range > 1e-12 * std::abs(*hi));
    for (auto& v : heat.values()) v = flat ? 0.0 : (v - min) / range;
    return heat;
}

}  // namespace bda::encoder
