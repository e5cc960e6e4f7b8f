#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "bda/autograd.hpp"
#include "bda/params.hpp"
#include "bda/tensor.hpp"

namespace bda::encoder {

// Hierarchical windowed-attention encoder ("Swin-style"): patch embedding,
// S stages of transformer blocks with (optionally shifted) window attention,
// and 2x2 patch merging between stages.
struct EncoderConfig {
    std::size_t patch_size = 4;
    std::vector<std::size_t> stage_depths{2, 2};
    std::vector<std::size_t> stage_dims{32, 64};
    std::size_t window_size = 4;
    std::vector<std::size_t> num_heads{2, 4};
    bool shifted_windows = true;
    std::size_t input_size = 64;

    std::size_t stages() const { return stage_dims.size(); }
    // Token grid side of stage s.
    std::size_t grid(std::size_t stage) const { return input_size / (patch_size << stage); }
    // Throws ConfigError on any violated invariant.
    void validate() const;
};

struct FeaturePyramid {
    std::vector<Tensor> maps;  // map s: (stage_dims[s], grid(s), grid(s))
};

// Attention weights of one block, shaped (windows, heads, tokens, tokens).
struct AttentionMatrix {
    std::shared_ptr<Tensor> weights;
    std::size_t grid = 0;
    std::size_t window = 0;
    std::vector<int> token_of_slot;
};

struct EncodeResult {
    std::vector<ag::Var> maps;
    AttentionMatrix final_attention;  // last block of the last stage
};

inline constexpr const char* kPrefix = "encoder.";

ParameterSet init_params(const EncoderConfig& config, std::uint64_t seed);

// Throws ShapeError naming the mismatching dimension, NumericError on NaN/Inf.
void check_image(const Tensor& image, const EncoderConfig& config);

EncodeResult encode(const ag::Var& image, const EncoderConfig& config, const ag::VarTable& params);
FeaturePyramid encode(const Tensor& image, const EncoderConfig& config, const ParameterSet& params);

// Mean attention each final-stage token receives, averaged over heads,
// bilinearly upsampled to input resolution and min-max normalised. Shape (1, H, W).
// A spatially constant result normalises to all zeros.
Tensor attention_rollup(const Tensor& image, const EncoderConfig& config, const ParameterSet& params);
// The (grid, grid) received-attention map before upsampling.
Tensor received_attention(const AttentionMatrix& attention);

}  // namespace bda::encoder
