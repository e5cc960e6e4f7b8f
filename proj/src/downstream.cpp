#include "bda/downstream.hpp"

#include <string>

#include "bda/error.hpp"
#include "bda/ops.hpp"

namespace bda::downstream {

namespace {

std::string pname(const std::string& n) { return std::string(kPrefix) + n; }

void add_conv(ParameterSet& p, const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
    p.add(pname(name) + ".weight", he_normal({out, in, k, k}, in * k * k, rng));
    p.add(pname(name) + ".bias", Tensor({out}, 0.0));
}

ag::Var conv(const ag::Var& x, const ag::VarTable& p, const std::string& name) {
    return ag::conv2d(x, p.at(pname(name) + ".weight"), p.at(pname(name) + ".bias"));
}

}  // namespace

void SegHeadConfig::validate() const {
    if (num_classes != kNumClasses) throw ConfigError("segmentation head must emit exactly 5 classes");
    if (ppm_bins.empty()) throw ConfigError("ppm_bins must be nonempty");
    for (auto b : ppm_bins)
        if (b == 0) throw ConfigError("ppm_bins entries must be positive");
    if (fusion_dim == 0) throw ConfigError("fusion_dim must be positive");
}

void DownstreamConfigs::validate() const {
    encoder.validate();
    head.validate();
    for (auto b : head.ppm_bins) {
        if (b > encoder.grid(encoder.stages() - 1)) {
            throw ConfigError("ppm bin " + std::to_string(b) + " exceeds the deepest feature map side");
        }
    }
}

ParameterSet init_head_params(const SegHeadConfig& config, const std::vector<std::size_t>& stage_channels,
                              std::uint64_t seed) {
    config.validate();
    if (stage_channels.size() < 2) throw ConfigError("segmentation head needs at least 2 pyramid levels");
    Rng rng(derive_seed(seed, 0x5E6EAD));
    ParameterSet p;
    const std::size_t f = config.fusion_dim, deep = stage_channels.back(), levels = stage_channels.size();
    for (std::size_t i = 0; i < config.ppm_bins.size(); ++i) add_conv(p, "ppm" + std::to_string(i), f, deep, 1, rng);
    add_conv(p, "bottleneck", f, deep + config.ppm_bins.size() * f, 3, rng);
    for (std::size_t s = 0; s + 1 < levels; ++s) add_conv(p, "lateral" + std::to_string(s), f, stage_channels[s], 1, rng);
    add_conv(p, "fuse", f, levels * f, 3, rng);
    add_conv(p, "classifier", config.num_classes, f, 1, rng);
    return p;
}

ParameterSet init_head_params(const DownstreamConfigs& configs, std::uint64_t seed) {
    configs.validate();
    std::vector<std::size_t> channels;
    for (auto d : configs.encoder.stage_dims) channels.push_back(2 * d);
    return init_head_params(configs.head, channels, seed);
}

ag::Var segmentation_head(const std::vector<ag::Var>& pyr, const SegHeadConfig& config, const ag::VarTable& params,
                          std::size_t output_size) {
    if (pyr.size() < 2) throw ShapeError("segmentation head needs at least 2 pyramid levels");
    for (std::size_t s = 0; s + 1 < pyr.size(); ++s) {
        if (pyr[s].shape().at(1) != 2 * pyr[s + 1].shape().at(1)) {
            throw ShapeError("pyramid level " + std::to_string(s + 1) + " is not half the resolution of level " +
                             std::to_string(s));
        }
    }
    const ag::Var& deep = pyr.back();
    const std::size_t g = deep.shape()[1];

    std::vector<ag::Var> ppm{deep};
    for (std::size_t i = 0; i < config.ppm_bins.size(); ++i) {
        ag::Var pooled = ag::adaptive_avg_pool(deep, config.ppm_bins[i]);
        pooled = ag::relu(conv(pooled, params, "ppm" + std::to_string(i)));
        ppm.push_back(ag::upsample_bilinear(pooled, g, g));
    }
    std::vector<ag::Var> levels(pyr.size());
    levels.back() = ag::relu(conv(ag::concat_channels(ppm), params, "bottleneck"));
    for (std::size_t s = pyr.size() - 1; s-- > 0;) {
        const std::size_t side = pyr[s].shape()[1];
        ag::Var lateral = ag::relu(conv(pyr[s], params, "lateral" + std::to_string(s)));
        levels[s] = ag::add(lateral, ag::upsample_bilinear(levels[s + 1], side, side));
    }
    const std::size_t side0 = pyr.front().shape()[1];
    for (auto& l : levels) l = ag::upsample_bilinear(l, side0, side0);
    ag::Var fused = ag::relu(conv(ag::concat_channels(levels), params, "fuse"));
    ag::Var scores = conv(fused, params, "classifier");
    return ag::upsample_bilinear(scores, output_size, output_size);
}

std::vector<ag::Var> concat_pyramids(const std::vector<ag::Var>& pre, const std::vector<ag::Var>& post) {
    if (pre.size() != post.size()) throw ShapeError("pre and post pyramids differ in depth");
    std::vector<ag::Var> out;
    for (std::size_t s = 0; s < pre.size(); ++s) out.push_back(ag::concat_channels({pre[s], post[s]}));
    return out;
}

ag::Var siamese_forward(const ag::Var& pre, const ag::Var& post, const DownstreamConfigs& configs,
                        const ag::VarTable& encoder_params, const ag::VarTable& head_params) {
    if (pre.shape() != post.shape()) {
        throw ShapeError("pre image " + shape_str(pre.shape()) + " and post image " + shape_str(post.shape()) +
                         " differ in shape");
    }
    auto a = encoder::encode(pre, configs.encoder, encoder_params);
    auto b = encoder::encode(post, configs.encoder, encoder_params);
    return segmentation_head(concat_pyramids(a.maps, b.maps), configs.head, head_params, configs.encoder.input_size);
}

PredictionMap siamese_forward(const Tensor& pre, const Tensor& post, const DownstreamConfigs& configs,
                              const ParameterSet& encoder_params, const ParameterSet& head_params) {
    return {siamese_forward(ag::constant(pre), ag::constant(post), configs, encoder_params.bind(false),
                            head_params.bind(false))
                .value()};
}

std::pair<DamageMask, LocalizationMask> predict_masks(const PredictionMap& pred) {
    const Tensor& s = pred.scores;
    if (s.rank() != 3 || s.dim(0) != kNumClasses) {
        throw ShapeError("prediction map must be (5, H, W), got " + shape_str(s.shape()));
    }
    if (!s.all_finite()) throw NumericError("prediction map contains non-finite scores");
    const std::size_t h = s.dim(1), w = s.dim(2), px = h * w;
    DamageMask damage(h, w);
    for (std::size_t p = 0; p < px; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c)
            if (s[c * px + p] > s[best * px + p]) best = c;
        damage.labels[p] = static_cast<std::uint8_t>(best);
    }
    LocalizationMask loc = localization_from_damage(damage);
    return {std::move(damage), std::move(loc)};
}

double dice_ce_loss(const PredictionMap& pred, const DamageMask& target, std::span<const double> class_weights) {
    target.validate();
    if (pred.scores.rank() != 3 || pred.scores.dim(1) != target.height || pred.scores.dim(2) != target.width) {
        throw ShapeError("prediction " + shape_str(pred.scores.shape()) + " does not match target " +
                         std::to_string(target.height) + "x" + std::to_string(target.width));
    }
    return ag::dice_ce(ag::constant(pred.scores), target.labels, class_weights).item();
}

FinetuneState init_finetune_state(const DownstreamConfigs& configs, ParameterSet encoder_params, std::uint64_t seed,
                                  double learning_rate) {
    FinetuneState state;
    state.encoder = std::move(encoder_params);
    state.head = init_head_params(configs, seed);
    state.optimizer = Adam(Adam::Options{learning_rate});
    return state;
}

ag::Var batch_loss(const FinetuneState& state, std::span<const ScenePair> batch, const DownstreamConfigs& configs,
                   const FinetuneOptions& options, ag::VarTable& encoder_vars, ag::VarTable& head_vars) {
    if (batch.empty()) throw DataError("fine-tuning batch is empty");
    encoder_vars = state.encoder.bind(!options.freeze_encoder);
    head_vars = state.head.bind(true);
    std::vector<ag::Var> losses;
    for (const auto& pair : batch) {
        pair.damage.validate();
        ag::Var scores = siamese_forward(ag::constant(pair.pre), ag::constant(pair.post), configs, encoder_vars, head_vars);
        losses.push_back(ag::dice_ce(scores, pair.damage.labels, options.class_weights));
    }
    return ag::average(losses);
}

FinetuneLog finetune_step(FinetuneState& state, std::span<const ScenePair> batch, const DownstreamConfigs& configs,
                          const FinetuneOptions& options) {
    ag::VarTable enc, head;
    ag::Var loss = batch_loss(state, batch, configs, options, enc, head);
    ag::backward(loss);

    ParameterSet grads = collect_gradients(head);
    ParameterSet trainable = state.head;
    if (!options.freeze_encoder) {
        grads.merge(collect_gradients(enc));
        trainable.merge(state.encoder);
    }
    FinetuneLog log{state.step, loss.item(), false};
    state.optimizer.set_learning_rate(options.learning_rate);
    log.skipped = !state.optimizer.step(trainable, grads);
    if (!log.skipped) {
        for (auto& [name, t] : state.head) t = trainable.at(name);
        if (!options.freeze_encoder)
            for (auto& [name, t] : state.encoder) t = trainable.at(name);
    }
    ++state.step;
    return log;
}

}  // namespace bda::downstream
