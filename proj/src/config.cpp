#include "bda/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <type_traits>

#include "bda/error.hpp"

namespace bda::cli {

namespace {

// Walks every field once; the same table drives reading and writing so no
// key can exist in one direction only.
template <class Config, class V>
void visit_fields(Config& c, V&& v) {
    v("run", "seed", c.run.seed);
    v("run", "out_dir", c.run.out_dir);

    v("data", "root", c.data.root);
    v("data", "synthetic_count", c.data.synthetic_count);
    v("data", "synthetic_buildings", c.data.synthetic_buildings);
    v("data", "unclassified_class", c.data.unclassified_class);
    v("data", "validation_fraction", c.data.validation_fraction);

    v("encoder", "patch_size", c.encoder.patch_size);
    v("encoder", "stage_depths", c.encoder.stage_depths);
    v("encoder", "stage_dims", c.encoder.stage_dims);
    v("encoder", "window_size", c.encoder.window_size);
    v("encoder", "num_heads", c.encoder.num_heads);
    v("encoder", "shifted_windows", c.encoder.shifted_windows);
    v("encoder", "input_size", c.encoder.input_size);

    v("augment", "crop_scale_min", c.augment.crop_scale_min);
    v("augment", "crop_scale_max", c.augment.crop_scale_max);
    v("augment", "flip_prob", c.augment.flip_prob);
    v("augment", "jitter_strength", c.augment.jitter_strength);
    v("augment", "blur_prob", c.augment.blur_prob);
    v("augment", "blur_sigma_min", c.augment.blur_sigma_min);
    v("augment", "blur_sigma_max", c.augment.blur_sigma_max);

    v("projector", "hidden_dim", c.projector.hidden_dim);
    v("projector", "output_dim", c.projector.output_dim);
    v("projector", "num_layers", c.projector.num_layers);

    v("decoder", "fusion_channels", c.decoder.fusion_channels);

    v("pretrain", "tau_s", c.pretrain.hyper.tau_s);
    v("pretrain", "tau_t", c.pretrain.hyper.tau_t);
    v("pretrain", "lambda_base", c.pretrain.hyper.lambda_base);
    v("pretrain", "center_momentum", c.pretrain.hyper.center_momentum);
    v("pretrain", "learning_rate", c.pretrain.hyper.learning_rate);
    v("pretrain", "batch_size", c.pretrain.hyper.batch_size);
    v("pretrain", "epochs", c.pretrain.epochs);
    v("pretrain", "disable_reconstruction", c.pretrain.disable_reconstruction);
    v("pretrain", "disable_centering", c.pretrain.disable_centering);
    v("pretrain", "checkpoint_every", c.pretrain.checkpoint_every);

    v("head", "fusion_dim", c.head.fusion_dim);
    v("head", "ppm_bins", c.head.ppm_bins);

    v("finetune", "learning_rate", c.finetune.learning_rate);
    v("finetune", "batch_size", c.finetune.batch_size);
    v("finetune", "epochs", c.finetune.epochs);
    v("finetune", "labeled_fraction", c.finetune.labeled_fraction);
    v("finetune", "freeze_encoder", c.finetune.freeze_encoder);
    v("finetune", "random_init", c.finetune.random_init);
    v("finetune", "class_weights", c.finetune.class_weights);
}

template <class T>
void read_value(const nlohmann::json& j, const std::string& key, T& dst) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) throw ConfigError(key + " must be true or false");
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!j.is_number_unsigned()) throw ConfigError(key + " must be a nonnegative integer");
        } else if constexpr (std::is_integral_v<T>) {
            if (!j.is_number_integer()) throw ConfigError(key + " must be an integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) throw ConfigError(key + " must be a number");
        }
        dst = j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(key + " has the wrong type");
    }
}

}  // namespace

void RunConfig::validate() const {
    pretrain_configs().validate();
    pretrain.hyper.validate();
    downstream_configs().validate();
    if (!(finetune.learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be nonnegative");
    if (finetune.batch_size == 0) throw ConfigError("finetune.batch_size must be positive");
    if (!(finetune.labeled_fraction > 0.0 && finetune.labeled_fraction <= 1.0)) {
        throw ConfigError("finetune.labeled_fraction must lie in (0, 1]");
    }
    if (!finetune.class_weights.empty() && finetune.class_weights.size() != kNumClasses) {
        throw ConfigError("finetune.class_weights needs exactly 5 entries");
    }
    for (double w : finetune.class_weights)
        if (!(w >= 0.0)) throw ConfigError("finetune.class_weights must be nonnegative");
    if (!(data.validation_fraction >= 0.0 && data.validation_fraction < 1.0)) {
        throw ConfigError("data.validation_fraction must lie in [0, 1)");
    }
    if (data.unclassified_class < 1 || data.unclassified_class > 4) {
        throw ConfigError("data.unclassified_class must lie in {1..4}");
    }
}

pretrain::PretrainConfigs RunConfig::pretrain_configs() const {
    pretrain::PretrainConfigs c;
    c.encoder = encoder;
    c.projector = projector;
    c.decoder = decoder;
    c.decoder.num_fusion_layers = encoder.stages();
    c.augment = augment;
    c.augment.output_size = encoder.input_size;
    c.disable_reconstruction = pretrain.disable_reconstruction;
    c.disable_centering = pretrain.disable_centering;
    c.seed = run.seed;
    return c;
}

downstream::DownstreamConfigs RunConfig::downstream_configs() const { return {encoder, head}; }

downstream::FinetuneOptions RunConfig::finetune_options() const {
    return {finetune.learning_rate, finetune.freeze_encoder, finetune.class_weights};
}

RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    std::map<std::string, std::set<std::string>> known;
    visit_fields(c, [&](const std::string& section, const std::string& key, auto& field) {
        known[section].insert(key);
        auto s = j.find(section);
        if (s == j.end()) return;
        if (!s->is_object()) throw ConfigError("config section '" + section + "' must be an object");
        auto v = s->find(key);
        if (v != s->end()) read_value(*v, section + "." + key, field);
    });
    for (const auto& [section, body] : j.items()) {
        auto k = known.find(section);
        if (k == known.end()) throw ConfigError("unknown config section '" + section + "'");
        for (const auto& [key, value] : body.items())
            if (!k->second.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

nlohmann::ordered_json config_to_json(const RunConfig& config) {
    nlohmann::ordered_json j;
    RunConfig copy = config;
    visit_fields(copy, [&](const std::string& section, const std::string& key, auto& field) { j[section][key] = field; });
    return j;
}

}  // namespace bda::cli
