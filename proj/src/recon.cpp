#include "bda/recon.hpp"

#include <cmath>
#include <string>

#include "bda/error.hpp"
#include "bda/ops.hpp"

namespace bda::recon {

namespace {

std::string fuse_name(std::size_t i) { return std::string(kPrefix) + "fuse" + std::to_string(i) + "."; }

}  // namespace

void DecoderConfig::validate() const {
    if (fusion_channels == 0) throw ConfigError("decoder fusion_channels must be positive");
    if (num_fusion_layers == 0) throw ConfigError("decoder num_fusion_layers must be positive");
}

ParameterSet init_params(const DecoderConfig& config, const std::vector<std::size_t>& stage_dims, std::uint64_t seed) {
    config.validate();
    if (stage_dims.size() != config.num_fusion_layers) {
        throw ConfigError("decoder num_fusion_layers (" + std::to_string(config.num_fusion_layers) +
                          ") must equal the encoder stage count (" + std::to_string(stage_dims.size()) + ")");
    }
    Rng rng(derive_seed(seed, 0xDEC0DE));
    ParameterSet p;
    const std::size_t f = config.fusion_channels;
    for (std::size_t i = 0; i < config.num_fusion_layers; ++i) {
        // Layer 0 sees the deepest map alone; later layers see [running, skip].
        const std::size_t level = stage_dims.size() - 1 - i;
        const std::size_t in = i == 0 ? stage_dims[level] : f + stage_dims[level];
        p.add(fuse_name(i) + "dw.weight", he_normal({in, 3, 3}, 9, rng));
        p.add(fuse_name(i) + "dw.bias", Tensor({in}, 0.0));
        p.add(fuse_name(i) + "pw.weight", he_normal({f, in, 1, 1}, in, rng));
        p.add(fuse_name(i) + "pw.bias", Tensor({f}, 0.0));
    }
    p.add(std::string(kPrefix) + "out.weight", he_normal({3, f, 1, 1}, f, rng));
    p.add(std::string(kPrefix) + "out.bias", Tensor({3}, 0.0));
    return p;
}

ag::Var decode(const std::vector<ag::Var>& pyramid, const DecoderConfig& config, const ag::VarTable& params,
               std::size_t output_size) {
    if (pyramid.size() != config.num_fusion_layers) {
        throw ShapeError("decoder expects " + std::to_string(config.num_fusion_layers) + " feature maps, got " +
                         std::to_string(pyramid.size()));
    }
    for (std::size_t s = 0; s + 1 < pyramid.size(); ++s) {
        if (pyramid[s].shape().at(1) != 2 * pyramid[s + 1].shape().at(1) ||
            pyramid[s].shape().at(2) != 2 * pyramid[s + 1].shape().at(2)) {
            throw ShapeError("feature map " + std::to_string(s + 1) + " " + shape_str(pyramid[s + 1].shape()) +
                             " is not half the resolution of map " + std::to_string(s) + " " +
                             shape_str(pyramid[s].shape()));
        }
    }
    auto fuse = [&](const ag::Var& x, std::size_t i) {
        const std::string n = fuse_name(i);
        ag::Var y = ag::depthwise_conv3x3(x, params.at(n + "dw.weight"), params.at(n + "dw.bias"));
        return ag::relu(ag::conv2d(y, params.at(n + "pw.weight"), params.at(n + "pw.bias")));
    };
    ag::Var x = fuse(pyramid.back(), 0);
    for (std::size_t i = 1; i < pyramid.size(); ++i) {
        const ag::Var& skip = pyramid[pyramid.size() - 1 - i];
        x = ag::upsample_bilinear(x, skip.shape()[1], skip.shape()[2]);
        x = fuse(ag::concat_channels({x, skip}), i);
    }
    x = ag::upsample_bilinear(x, output_size, output_size);
    return ag::conv2d(x, params.at(std::string(kPrefix) + "out.weight"), params.at(std::string(kPrefix) + "out.bias"));
}

Tensor decode(const std::vector<Tensor>& pyramid, const DecoderConfig& config, const ParameterSet& params,
              std::size_t output_size) {
    std::vector<ag::Var> maps;
    for (const auto& m : pyramid) maps.push_back(ag::constant(m));
    return decode(maps, config, params.bind(false), output_size).value();
}

double reconstruction_loss(const Tensor& x, const Tensor& x_re) {
    if (x.shape() != x_re.shape()) {
        throw ShapeError("reconstruction_loss: shape " + shape_str(x.shape()) + " vs " + shape_str(x_re.shape()));
    }
    return ag::mean_abs_error(ag::constant(x), ag::constant(x_re)).item();
}

}  // namespace bda::recon
