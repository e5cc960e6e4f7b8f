#include "bda/runs.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "bda/error.hpp"
#include "bda/image_io.hpp"
#include "bda/plot.hpp"

namespace fs = std::filesystem;

namespace bda::cli {

namespace {

constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kHoldoutStream = 0x401D;
constexpr std::uint64_t kLabeledStream = 0x1AB;
constexpr std::uint64_t kPretrainOrder = 0xE90C00;
constexpr std::uint64_t kFinetuneOrder = 0xF17E00;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t stream, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, stream + epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
    return order;
}

std::ofstream open_log(const fs::path& path, bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw Error("cannot write log " + path.string());
    return out;
}

// The fields that must agree for a resumed run to replay the original one.
nlohmann::ordered_json resume_signature(const RunConfig& c) {
    auto j = config_to_json(c);
    j["run"].erase("out_dir");
    return j;
}

std::vector<double> read_log_series(const fs::path& path, const char* key) {
    std::vector<double> out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains(key)) continue;
        out.push_back(j[key].is_number() ? j[key].get<double>() : std::nan(""));
    }
    return out;
}

void write_mask(const fs::path& path, const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w) {
    io::write_png(path, io::Raster{w, h, 1, labels});
}

}  // namespace

RunData prepare_data(const RunConfig& config) {
    RunData d;
    if (config.data.synthetic_count > 0) {
        d.manifest = data::manifest_from_pairs(data::generate_synthetic_set(config.data.synthetic_count,
                                                                            derive_seed(config.run.seed, kDataStream),
                                                                            config.encoder.input_size,
                                                                            config.data.synthetic_buildings));
    } else if (!config.data.root.empty()) {
        data::LoadOptions lo;
        lo.unclassified_class = config.data.unclassified_class;
        d.manifest = data::load_dataset(config.data.root, lo);
    } else {
        throw ConfigError("no data source: set data.root or pass --synthetic N");
    }
    auto [train, held] = data::holdout_split(d.manifest.labeled_pairs(), config.data.validation_fraction,
                                             derive_seed(config.run.seed, kHoldoutStream));
    d.train_labeled = std::move(train);
    d.held_out = std::move(held);
    std::set<std::string> held_ids;
    for (const auto& p : d.held_out) held_ids.insert(p.id);
    for (const auto& p : d.manifest.pairs)
        if (!held_ids.count(p.id)) d.unlabeled_pool.push_back(p);
    return d;
}

std::vector<Tensor> pretrain_images(const RunData& data) {
    std::vector<Tensor> images;
    for (const auto& p : data.unlabeled_pool) {
        images.push_back(p.pre);
        images.push_back(p.post);
    }
    return images;
}

PretrainResult run_pretrain(const RunConfig& config, const PretrainOptions& options) {
    config.validate();
    const auto configs = config.pretrain_configs();
    const auto hyper = config.pretrain_hyper();
    const fs::path out = config.run.out_dir;
    fs::create_directories(out);

    const auto images = pretrain_images(prepare_data(config));
    if (images.empty()) throw DataError("no images available for pre-training");
    const std::size_t bs = hyper.batch_size;
    const std::size_t steps_per_epoch = (images.size() + bs - 1) / bs;
    const auto total = static_cast<std::int64_t>(config.pretrain.epochs * steps_per_epoch);
    if (total == 0) throw ConfigError("pretrain.epochs must be positive");

    pretrain::TwinState state;
    const bool resuming = !options.resume.empty();
    if (resuming) {
        Checkpoint ckpt = load_checkpoint(options.resume);
        if (resume_signature(ckpt.config()) != resume_signature(config)) {
            throw ConfigError("resume checkpoint was written with a different configuration");
        }
        state = restore_pretrain_state(ckpt, config);
        if (state.total_steps != total) throw ConfigError("resume checkpoint plans a different number of steps");
    } else {
        state = pretrain::init_state(configs, hyper, total);
    }

    PretrainResult result;
    result.checkpoint_path = out / "pretrain.ckpt";
    const fs::path log_path = out / "pretrain_log.jsonl";
    std::ofstream log = open_log(log_path, resuming);
    const std::int64_t stop = options.stop_at_step < 0 ? total : std::min(total, options.stop_at_step);
    const std::size_t every = config.pretrain.checkpoint_every > 0 ? config.pretrain.checkpoint_every : steps_per_epoch;

    std::size_t cached_epoch = SIZE_MAX;
    std::vector<std::size_t> order;
    std::vector<Tensor> batch;
    while (state.step < stop) {
        const auto step = static_cast<std::size_t>(state.step);
        const std::size_t epoch = step / steps_per_epoch, b = step % steps_per_epoch;
        if (epoch != cached_epoch) {
            order = epoch_order(images.size(), config.run.seed, kPretrainOrder, epoch);
            cached_epoch = epoch;
        }
        batch.clear();
        for (std::size_t i = b * bs; i < std::min(images.size(), (b + 1) * bs); ++i) batch.push_back(images[order[i]]);
        auto entry = pretrain::pretrain_step(state, batch, hyper, configs);
        log << entry.to_json_line() << '\n';
        if (options.progress && (b + 1 == steps_per_epoch)) {
            *options.progress << "pretrain epoch " << epoch + 1 << "/" << config.pretrain.epochs << " step "
                              << state.step << " total " << entry.total << " L1 " << entry.l1 << " L2 " << entry.l2
                              << '\n';
        }
        result.logs.push_back(std::move(entry));
        if (state.step % static_cast<std::int64_t>(every) == 0 && state.step < stop) {
            save_checkpoint(result.checkpoint_path, pretrain_checkpoint(state, config));
        }
    }
    log.close();
    result.checkpoint = pretrain_checkpoint(state, config);
    save_checkpoint(result.checkpoint_path, result.checkpoint);
    plot::write_line_chart(out / "pretrain_loss.png",
                           {read_log_series(log_path, "total"), read_log_series(log_path, "L1"),
                            read_log_series(log_path, "L2")});
    return result;
}

metrics::ConfusionCounts score_pairs(const std::vector<ScenePair>& pairs, const downstream::DownstreamConfigs& configs,
                                     const ParameterSet& encoder_params, const ParameterSet& head_params) {
    metrics::ConfusionCounts counts;
    for (const auto& p : pairs) {
        auto [damage, loc] = downstream::predict_masks(
            downstream::siamese_forward(p.pre, p.post, configs, encoder_params, head_params));
        if (!(loc == localization_from_damage(damage))) throw Error("localization mask disagrees with damage mask");
        counts += metrics::confusion_counts(damage, p.damage);
    }
    return counts;
}

FinetuneResult run_finetune(const RunConfig& config, const FinetuneOptions& options) {
    config.validate();
    const auto configs = config.downstream_configs();
    const fs::path out = config.run.out_dir;
    fs::create_directories(out);

    ParameterSet encoder_params;
    if (config.finetune.random_init) {
        encoder_params = encoder::init_params(config.encoder, config.run.seed);
    } else {
        if (options.init_checkpoint.empty()) {
            throw ConfigError("fine-tuning needs a pre-training checkpoint or --random-init");
        }
        encoder_params = load_checkpoint(options.init_checkpoint).encoder_params();
        if (!encoder_params.same_layout(encoder::init_params(config.encoder, 0))) {
            throw ConfigError("checkpoint encoder does not match the configured encoder architecture");
        }
    }

    RunData d = prepare_data(config);
    auto split = data::split_labeled(data::manifest_from_pairs(d.train_labeled), config.finetune.labeled_fraction,
                                     derive_seed(config.run.seed, kLabeledStream));
    const auto labeled = split.labeled_pairs();
    if (labeled.empty()) throw DataError("no labeled pairs available for fine-tuning");

    auto state = downstream::init_finetune_state(configs, std::move(encoder_params), config.run.seed,
                                                 config.finetune.learning_rate);
    const auto opts = config.finetune_options();
    FinetuneResult result;
    result.labeled_pairs = labeled.size();
    const fs::path log_path = out / "finetune_log.jsonl";
    std::ofstream log = open_log(log_path, false);
    const std::size_t bs = config.finetune.batch_size;
    std::vector<ScenePair> batch;
    for (std::size_t epoch = 0; epoch < config.finetune.epochs; ++epoch) {
        const auto order = epoch_order(labeled.size(), config.run.seed, kFinetuneOrder, epoch);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < labeled.size(); start += bs) {
            batch.clear();
            for (std::size_t i = start; i < std::min(labeled.size(), start + bs); ++i) batch.push_back(labeled[order[i]]);
            auto step = downstream::finetune_step(state, batch, configs, opts);
            loss_sum += step.loss;
            ++batches;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.loss = loss_sum / double(batches);
        rec.validation = d.held_out.empty() ? metrics::evaluate(metrics::ConfusionCounts{})
                                            : metrics::evaluate(score_pairs(d.held_out, configs, state.encoder, state.head));
        auto line = nlohmann::ordered_json::parse(metrics::to_json(rec.validation));
        nlohmann::ordered_json j;
        j["epoch"] = rec.epoch;
        j["loss"] = rec.loss;
        for (auto& [k, v] : line.items()) j[k] = v;
        log << j.dump() << '\n';
        if (options.progress) *options.progress << j.dump() << '\n';
        result.epochs.push_back(rec);
    }
    log.close();
    result.checkpoint = finetune_checkpoint(state, config, config.finetune.epochs);
    result.checkpoint_path = out / "finetune.ckpt";
    save_checkpoint(result.checkpoint_path, result.checkpoint);
    std::vector<double> loss, loc, dmg;
    for (const auto& e : result.epochs) {
        loss.push_back(e.loss);
        loc.push_back(e.validation.localization);
        dmg.push_back(e.validation.damage);
    }
    plot::write_line_chart(out / "finetune_loss.png", {loss});
    plot::write_line_chart(out / "finetune_f1.png", {loc, dmg});
    return result;
}

metrics::F1Report run_evaluate(const RunConfig& config, const EvaluateOptions& options) {
    config.validate();
    const fs::path out = config.run.out_dir;
    Checkpoint ckpt;
    RunConfig model = config;
    if (!options.oracle) {
        if (options.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint (or --oracle)");
        ckpt = load_checkpoint(options.checkpoint);
        if (!ckpt.has_head()) throw ConfigError("stage-2 checkpoint required: " + options.checkpoint.string() + " has no segmentation head");
        model = ckpt.config();
    }
    RunData d = prepare_data(config);
    const auto& pairs = config.data.validation_fraction > 0.0 ? d.held_out : d.train_labeled;
    if (pairs.empty()) throw DataError("evaluation set is empty");

    const auto configs = model.downstream_configs();
    const ParameterSet enc = options.oracle ? ParameterSet{} : ckpt.encoder_params();
    const ParameterSet head = options.oracle ? ParameterSet{} : ckpt.tensors.with_prefix(downstream::kPrefix);
    if (options.write_masks) fs::create_directories(out / "masks");
    metrics::ConfusionCounts counts;
    for (const auto& p : pairs) {
        DamageMask damage = p.damage;
        if (!options.oracle) {
            damage = downstream::predict_masks(downstream::siamese_forward(p.pre, p.post, configs, enc, head)).first;
        }
        const auto loc = localization_from_damage(damage);
        counts += metrics::confusion_counts(damage, p.damage);
        if (options.write_masks) {
            write_mask(out / "masks" / (p.id + "_damage.png"), damage.labels, damage.height, damage.width);
            write_mask(out / "masks" / (p.id + "_localization.png"), loc.labels, loc.height, loc.width);
        }
    }
    auto report = metrics::evaluate(counts);
    fs::create_directories(out);
    std::ofstream(out / "report.json") << metrics::to_json(report) << '\n';
    return report;
}

VisualizeResult run_visualize(const RunConfig& config, const VisualizeOptions& options) {
    if (options.checkpoint.empty()) throw ConfigError("visualize needs --checkpoint");
    const Checkpoint ckpt = load_checkpoint(options.checkpoint);
    const RunConfig model = ckpt.config();
    const ParameterSet enc = ckpt.encoder_params();
    RunData d = prepare_data(config);
    const ScenePair* pair = nullptr;
    for (const auto& p : d.manifest.pairs)
        if (options.pair_id.empty() || p.id == options.pair_id) {
            pair = &p;
            break;
        }
    if (!pair) throw DataError(options.pair_id.empty() ? "dataset has no pairs" : "no pair with id '" + options.pair_id + "'");

    const Tensor heat = encoder::attention_rollup(pair->post, model.encoder, enc);
    std::vector<Tensor> tiles{pair->pre, pair->post};
    if (d.manifest.is_labeled(pair->id)) tiles.push_back(plot::colorize_mask(pair->damage));
    tiles.push_back(plot::colorize_heatmap(heat));

    const fs::path out = config.run.out_dir;
    fs::create_directories(out);
    VisualizeResult r;
    r.tiles = tiles.size();
    r.panel = out / ("attention_" + pair->id + "_panel.png");
    r.heatmap = out / ("attention_" + pair->id + "_heatmap.png");
    io::write_image(r.panel, plot::hstack(tiles));
    io::write_image(r.heatmap, heat);
    return r;
}

std::size_t run_gen_data(const RunConfig& config) {
    if (config.data.synthetic_count == 0) throw ConfigError("gen-data needs --synthetic N with N > 0");
    if (config.encoder.input_size < 32) throw ConfigError("synthetic scenes need encoder.input_size >= 32");
    auto pairs = data::generate_synthetic_set(config.data.synthetic_count, derive_seed(config.run.seed, kDataStream),
                                              config.encoder.input_size, config.data.synthetic_buildings);
    data::export_dataset(data::manifest_from_pairs(std::move(pairs)), config.run.out_dir);
    return config.data.synthetic_count;
}

}  // namespace bda::cli
