#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bda/downstream.hpp"
#include "bda/pretrain.hpp"
#include "json.hpp"

namespace bda::cli {

struct RunSection {
    std::uint64_t seed = 0;
    std::string out_dir = "runs";
};

struct DataSection {
    std::string root;                  // xBD-layout directory
    std::size_t synthetic_count = 0;   // > 0 generates this many pairs instead of reading root
    std::size_t synthetic_buildings = 5;
    int unclassified_class = 1;
    double validation_fraction = 0.2;  // pairs held out from both training stages
};

struct PretrainSection {
    pretrain::PretrainHyper hyper;
    std::size_t epochs = 10;
    bool disable_reconstruction = false;
    bool disable_centering = false;
    std::size_t checkpoint_every = 0;  // steps; 0 writes one checkpoint per epoch
};

struct FinetuneSection {
    double learning_rate = 1e-4;
    std::size_t batch_size = 2;
    std::size_t epochs = 30;
    double labeled_fraction = 0.2;
    bool freeze_encoder = false;
    bool random_init = false;
    std::vector<double> class_weights;
};

// Every experiment knob, grouped in sections that mirror the config file.
struct RunConfig {
    RunSection run;
    DataSection data;
    encoder::EncoderConfig encoder;
    augment::AugmentConfig augment;
    pretrain::ProjectorConfig projector;
    recon::DecoderConfig decoder;
    PretrainSection pretrain;
    downstream::SegHeadConfig head;
    FinetuneSection finetune;

    void validate() const;
    pretrain::PretrainConfigs pretrain_configs() const;
    pretrain::PretrainHyper pretrain_hyper() const { return pretrain.hyper; }
    downstream::DownstreamConfigs downstream_configs() const;
    downstream::FinetuneOptions finetune_options() const;
};

// Absent keys keep their defaults; unknown keys and wrong types throw ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::ordered_json config_to_json(const RunConfig& config);

}  // namespace bda::cli
