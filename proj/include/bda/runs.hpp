#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "bda/checkpoint.hpp"
#include "bda/config.hpp"
#include "bda/data.hpp"
#include "bda/metrics.hpp"

// The command-level pipeline behind the ssl-bda tool. Every run writes into
// config.run.out_dir and is fully determined by the config.
namespace bda::cli {

// Labeled pairs are split once into training and held-out parts; the held-out
// pairs are never seen by either training stage.
struct RunData {
    data::DatasetManifest manifest;
    std::vector<ScenePair> train_labeled;
    std::vector<ScenePair> held_out;
    std::vector<ScenePair> unlabeled_pool;  // every pair not held out
};
RunData prepare_data(const RunConfig& config);

// Pre-training images: pre and post image of every pool pair.
std::vector<Tensor> pretrain_images(const RunData& data);

struct PretrainOptions {
    std::filesystem::path resume;   // checkpoint to continue from
    std::int64_t stop_at_step = -1;  // stop once this many steps are done (-1: run to the end)
    std::ostream* progress = nullptr;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::filesystem::path checkpoint_path;
    std::vector<pretrain::StepLog> logs;  // steps run by this call
};

PretrainResult run_pretrain(const RunConfig& config, const PretrainOptions& options = {});

struct FinetuneOptions {
    std::filesystem::path init_checkpoint;  // ignored with finetune.random_init
    std::ostream* progress = nullptr;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;  // mean training loss over the epoch
    metrics::F1Report validation;
};

struct FinetuneResult {
    Checkpoint checkpoint;
    std::filesystem::path checkpoint_path;
    std::vector<EpochRecord> epochs;
    std::size_t labeled_pairs = 0;
};

FinetuneResult run_finetune(const RunConfig& config, const FinetuneOptions& options = {});

struct EvaluateOptions {
    std::filesystem::path checkpoint;
    bool oracle = false;  // score the ground truth against itself
    bool write_masks = true;
};

metrics::F1Report run_evaluate(const RunConfig& config, const EvaluateOptions& options);

// Siamese prediction + confusion accumulation over pairs.
metrics::ConfusionCounts score_pairs(const std::vector<ScenePair>& pairs, const downstream::DownstreamConfigs& configs,
                                     const ParameterSet& encoder_params, const ParameterSet& head_params);

struct VisualizeOptions {
    std::filesystem::path checkpoint;
    std::string pair_id;  // empty: first pair
};

struct VisualizeResult {
    std::filesystem::path panel;
    std::filesystem::path heatmap;
    std::size_t tiles = 0;
};

VisualizeResult run_visualize(const RunConfig& config, const VisualizeOptions& options);

// Writes data.synthetic_count generated pairs in the xBD layout under out_dir.
std::size_t run_gen_data(const RunConfig& config);

}  // namespace bda::cli
