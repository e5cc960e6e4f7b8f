#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "bda/autograd.hpp"
#include "bda/encoder.hpp"
#include "bda/params.hpp"
#include "bda/scene.hpp"

// Stage-2 siamese segmentation model: one shared encoder applied to the pre-
// and post-disaster images, per-stage channel concatenation, and a pyramid
// pooling + top-down fusion head emitting 5-class score maps.
namespace bda::downstream {

struct SegHeadConfig {
    std::size_t fusion_dim = 64;
    std::vector<std::size_t> ppm_bins{1, 2, 4};
    std::size_t num_classes = kNumClasses;

    void validate() const;
};

struct DownstreamConfigs {
    encoder::EncoderConfig encoder;
    SegHeadConfig head;

    void validate() const;
};

// Unnormalised per-pixel class scores, (5, H, W).
struct PredictionMap {
    Tensor scores;
};

inline constexpr const char* kPrefix = "head.";

// stage_channels: channel count of each concatenated level (2 x encoder dims).
ParameterSet init_head_params(const SegHeadConfig& config, const std::vector<std::size_t>& stage_channels,
                              std::uint64_t seed);
ParameterSet init_head_params(const DownstreamConfigs& configs, std::uint64_t seed);

ag::Var segmentation_head(const std::vector<ag::Var>& concat_pyramid, const SegHeadConfig& config,
                          const ag::VarTable& params, std::size_t output_size);

// Both images go through the same encoder parameters.
ag::Var siamese_forward(const ag::Var& pre, const ag::Var& post, const DownstreamConfigs& configs,
                        const ag::VarTable& encoder_params, const ag::VarTable& head_params);
PredictionMap siamese_forward(const Tensor& pre, const Tensor& post, const DownstreamConfigs& configs,
                              const ParameterSet& encoder_params, const ParameterSet& head_params);
// Per-stage concatenation [pre | post] of the two encoder pyramids.
std::vector<ag::Var> concat_pyramids(const std::vector<ag::Var>& pre, const std::vector<ag::Var>& post);

// Argmax over channels (ties to the lowest class) and the derived building mask.
std::pair<DamageMask, LocalizationMask> predict_masks(const PredictionMap& pred);

double dice_ce_loss(const PredictionMap& pred, const DamageMask& target, std::span<const double> class_weights = {});

struct FinetuneOptions {
    double learning_rate = 1e-4;
    bool freeze_encoder = false;
    std::vector<double> class_weights;  // empty: unweighted
};

struct FinetuneState {
    ParameterSet encoder;  // encoder.*
    ParameterSet head;     // head.*
    Adam optimizer;
    std::int64_t step = 0;
};

struct FinetuneLog {
    std::int64_t step = 0;
    double loss = 0.0;
    bool skipped = false;
};

FinetuneState init_finetune_state(const DownstreamConfigs& configs, ParameterSet encoder_params, std::uint64_t seed,
                                  double learning_rate);

// Mean Dice+CE over the batch.
ag::Var batch_loss(const FinetuneState& state, std::span<const ScenePair> batch, const DownstreamConfigs& configs,
                   const FinetuneOptions& options, ag::VarTable& encoder_vars, ag::VarTable& head_vars);

FinetuneLog finetune_step(FinetuneState& state, std::span<const ScenePair> batch, const DownstreamConfigs& configs,
                          const FinetuneOptions& options);

}  // namespace bda::downstream
