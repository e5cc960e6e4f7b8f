#pragma once

#include <cstdint>
#include <vector>

#include "bda/autograd.hpp"
#include "bda/params.hpp"
#include "bda/tensor.hpp"

namespace bda::recon {

// Lightweight decoder recovering the student's input view from the encoder's
// feature pyramid. One fusion layer per pyramid level: the deepest map is
// fused on its own, every shallower level is fused after upsampling the
// running result by 2 and concatenating. A fusion layer is a 3x3 depthwise
// convolution, a 1x1 pointwise convolution to fusion_channels, and a ReLU.
struct DecoderConfig {
    std::size_t fusion_channels = 32;
    std::size_t num_fusion_layers = 2;

    void validate() const;
};

inline constexpr const char* kPrefix = "decoder.";

// stage_dims: channel count of each pyramid level, shallow to deep.
ParameterSet init_params(const DecoderConfig& config, const std::vector<std::size_t>& stage_dims, std::uint64_t seed);

// Returns a (3, output_size, output_size) image.
ag::Var decode(const std::vector<ag::Var>& pyramid, const DecoderConfig& config, const ag::VarTable& params,
               std::size_t output_size);
Tensor decode(const std::vector<Tensor>& pyramid, const DecoderConfig& config, const ParameterSet& params,
              std::size_t output_size);

// Mean absolute error over all pixels and channels.
double reconstruction_loss(const Tensor& x, const Tensor& x_re);

}  // namespace bda::recon
