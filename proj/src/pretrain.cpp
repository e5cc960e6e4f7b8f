#include "bda/pretrain.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "bda/error.hpp"
#include "bda/ops.hpp"
#include "json.hpp"

namespace bda::pretrain {

namespace {

std::string layer_name(std::size_t i) { return std::string(kProjectorPrefix) + "layer" + std::to_string(i) + "."; }

void check_simplex(const Tensor& p, const char* what) {
    double s = 0.0;
    for (double v : p.values()) {
        if (!(v >= 0.0)) throw NumericError(std::string(what) + " has a negative or NaN entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-5) throw NumericError(std::string(what) + " does not sum to 1");
}

double entropy(const Tensor& p) {
    double h = 0.0;
    for (double v : p.values())
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

}  // namespace

void ProjectorConfig::validate() const {
    if (hidden_dim == 0 || output_dim == 0 || num_layers == 0) throw ConfigError("projector dims must be positive");
}

void PretrainHyper::validate() const {
    if (!(tau_s > 0.0) || !(tau_t > 0.0)) throw ConfigError("temperatures must be positive");
    if (!(lambda_base > 0.0 && lambda_base < 1.0)) throw ConfigError("lambda_base must lie in (0, 1)");
    if (!(center_momentum > 0.0 && center_momentum < 1.0)) throw ConfigError("center_momentum must lie in (0, 1)");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

void PretrainConfigs::validate() const {
    encoder.validate();
    projector.validate();
    decoder.validate();
    augment.validate();
    if (decoder.num_fusion_layers != encoder.stages()) {
        throw ConfigError("decoder num_fusion_layers must equal the encoder stage count");
    }
    if (augment.output_size != encoder.input_size) throw ConfigError("augment output_size must equal encoder input_size");
}

void TwinState::validate() const {
    if (!student.same_layout(teacher)) throw Error("student and teacher parameter layouts differ");
    if (!center.all_finite()) throw NumericError("center contains non-finite values");
    if (step < 0 || step > total_steps) throw Error("step counter outside [0, total_steps]");
}

std::string StepLog::to_json_line() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["L1"] = l1;
    j["L2"] = l2;
    j["total"] = total;
    j["lambda"] = lambda;
    j["entropy"] = entropy;
    if (skipped) j["skipped"] = true;
    return j.dump();
}

ParameterSet init_projector_params(const ProjectorConfig& config, std::size_t in_dim, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, 0x9E0EC7));
    ParameterSet p;
    std::size_t in = in_dim;
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::size_t out = i + 1 == config.num_layers ? config.output_dim : config.hidden_dim;
        p.add(layer_name(i) + "weight", truncated_normal({in, out}, 0.02, rng));
        p.add(layer_name(i) + "bias", Tensor({out}, 0.0));
        in = out;
    }
    return p;
}

TwinState init_state(const PretrainConfigs& configs, const PretrainHyper& hyper, std::int64_t total_steps) {
    configs.validate();
    hyper.validate();
    TwinState state;
    state.student = encoder::init_params(configs.encoder, configs.seed);
    state.student.merge(init_projector_params(configs.projector, configs.encoder.stage_dims.back(), configs.seed));
    state.teacher = state.student;
    state.decoder = recon::init_params(configs.decoder, configs.encoder.stage_dims, configs.seed);
    state.loss_weights.add(kWeightS1, Tensor({1}, 0.0));
    state.loss_weights.add(kWeightS2, Tensor({1}, 0.0));
    state.center = Tensor({configs.projector.output_dim}, 0.0);
    state.total_steps = total_steps;
    state.optimizer = Adam(Adam::Options{hyper.learning_rate});
    return state;
}

ag::Var project(const ag::Var& final_map, const ProjectorConfig& config, const ag::VarTable& params) {
    ag::Var pooled = ag::global_avg_pool(final_map);
    ag::Var row = ag::reshape(pooled, {1, pooled.value().size()});
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::string n = layer_name(i);
        const Tensor& w = params.at(n + "weight").value();
        if (w.dim(0) != row.shape()[1]) {
            throw ShapeError("projector layer " + std::to_string(i) + " expects width " + std::to_string(w.dim(0)) +
                             ", got " + std::to_string(row.shape()[1]));
        }
        if (i + 1 < config.num_layers) {
            row = ag::gelu(ag::linear(row, params.at(n + "weight"), params.at(n + "bias")));
            continue;
        }
        // Cosine output layer: unit-norm input against unit-norm weight columns.
        const std::size_t width = row.shape()[1];
        row = ag::reshape(ag::normalize_columns(ag::reshape(row, {width, 1})), {1, width});
        row = ag::linear(row, ag::normalize_columns(params.at(n + "weight")), params.at(n + "bias"));
    }
    return ag::reshape(row, {row.value().size()});
}

Tensor project(const encoder::FeaturePyramid& pyramid, const ProjectorConfig& config, const ParameterSet& params) {
    if (pyramid.maps.empty()) throw ShapeError("project: empty pyramid");
    return project(ag::constant(pyramid.maps.back()), config, params.bind(false)).value();
}

Tensor sharpen(const Tensor& logits, double tau, const Tensor* center) {
    return ag::tempered_softmax(ag::constant(logits.reshaped({logits.size()})), tau, center).value();
}

double contrastive_loss(const Tensor& p_s, const Tensor& p_t) {
    if (p_s.size() != p_t.size()) {
        throw ShapeError("contrastive_loss: length " + std::to_string(p_s.size()) + " vs " + std::to_string(p_t.size()));
    }
    check_simplex(p_s, "student distribution");
    check_simplex(p_t, "teacher distribution");
    return ag::soft_cross_entropy(ag::constant(p_s), p_t).item();
}

double cosine_momentum(std::int64_t step, std::int64_t total_steps, double lambda_base) {
    if (total_steps <= 0 || step < 0 || step > total_steps) {
        throw Error("cosine_momentum: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    }
    if (step == total_steps) return 1.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 - (1.0 - lambda_base) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

ParameterSet ema_update_params(const ParameterSet& teacher, const ParameterSet& student, double lam) {
    if (!teacher.same_layout(student)) throw ShapeError("ema_update_params: parameter layouts differ");
    if (!(lam >= 0.0 && lam <= 1.0)) throw Error("ema_update_params: momentum outside [0, 1]");
    ParameterSet out = teacher;
    for (auto& [name, t] : out) {
        const Tensor& s = student.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = lam * t[i] + (1.0 - lam) * s[i];
    }
    return out;
}

Tensor update_center(const Tensor& center, const Tensor& teacher_logits, double momentum) {
    if (!(momentum > 0.0 && momentum < 1.0)) throw Error("update_center: momentum outside (0, 1)");
    const std::size_t k = center.size();
    if (teacher_logits.rank() != 2 || teacher_logits.dim(1) != k || teacher_logits.dim(0) == 0) {
        throw ShapeError("update_center: logits " + shape_str(teacher_logits.shape()) + " for center of length " +
                         std::to_string(k));
    }
    const std::size_t rows = teacher_logits.dim(0);
    Tensor out = center;
    for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += teacher_logits[r * k + j];
        out[j] = momentum * center[j] + (1.0 - momentum) * (s / static_cast<double>(rows));
    }
    return out;
}

ag::Var combine_losses(const ag::Var& l1, const ag::Var& l2, const ag::Var& s1, const ag::Var& s2) {
    if (!l1.value().all_finite() || !l2.value().all_finite()) throw NumericError("combine_losses: non-finite loss");
    ag::Var a = ag::add(ag::mul(ag::exp(ag::scale(s1, -1.0)), l1), s1);
    ag::Var b = ag::add(ag::mul(ag::exp(ag::scale(s2, -1.0)), l2), s2);
    return ag::add(a, b);
}

double combine_losses(double l1, double l2, double s1, double s2) {
    return combine_losses(ag::constant(Tensor::scalar(l1)), ag::constant(Tensor::scalar(l2)),
                          ag::constant(Tensor::scalar(s1)), ag::constant(Tensor::scalar(s2)))
        .item();
}

LossGraph build_loss(const TwinState& state, std::span<const Tensor> batch, const PretrainHyper& hyper,
                     const PretrainConfigs& configs, bool bind_teacher_grad) {
    if (batch.empty()) throw DataError("pretrain batch is empty");
    LossGraph g;
    g.student = state.student.bind(true);
    g.teacher = state.teacher.bind(bind_teacher_grad);
    g.decoder = state.decoder.bind(!configs.disable_reconstruction);
    g.loss_weights = state.loss_weights.bind(true);

    const std::size_t k = state.center.size();
    const std::size_t n = batch.size();
    g.teacher_logits = Tensor({n, k});
    g.teacher_mean = Tensor({k}, 0.0);

    std::vector<Tensor> student_views;
    for (std::size_t i = 0; i < n; ++i) {
        const auto index = static_cast<std::uint64_t>(state.step) * hyper.batch_size + i;
        auto [xs, xt] = augment::make_views(batch[i], configs.augment, augment::sample_seed(configs.seed, index));
        student_views.push_back(std::move(xs));
        auto teacher_out = encoder::encode(ag::constant(xt), configs.encoder, g.teacher);
        const Tensor out_t = project(teacher_out.maps.back(), configs.projector, g.teacher).value();
        std::copy(out_t.values().begin(), out_t.values().end(), g.teacher_logits.data() + i * k);
    }

    // A zero-initialised center would leave the first steps uncentered; the
    // first batch seeds it instead.
    g.center = Tensor({k}, 0.0);
    if (!configs.disable_centering) {
        if (state.step == 0) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) g.center[j] += g.teacher_logits[i * k + j] / static_cast<double>(n);
        } else {
            g.center = state.center;
        }
    }

    std::vector<ag::Var> l1_terms, l2_terms;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor out_t({k});
        std::copy_n(g.teacher_logits.data() + i * k, k, out_t.data());
        const Tensor p_t = sharpen(out_t, hyper.tau_t, &g.center);
        for (std::size_t j = 0; j < k; ++j) g.teacher_mean[j] += p_t[j] / static_cast<double>(n);
        g.teacher_entropy += entropy(p_t) / static_cast<double>(n);

        const Tensor& xs = student_views[i];
        auto student_out = encoder::encode(ag::constant(xs), configs.encoder, g.student);
        ag::Var p_s = ag::tempered_softmax(project(student_out.maps.back(), configs.projector, g.student), hyper.tau_s);
        l1_terms.push_back(ag::soft_cross_entropy(p_s, p_t));
        if (!configs.disable_reconstruction) {
            ag::Var x_re = recon::decode(student_out.maps, configs.decoder, g.decoder, configs.encoder.input_size);
            l2_terms.push_back(ag::mean_abs_error(x_re, ag::constant(xs)));
        }
    }
    g.l1 = ag::average(l1_terms);
    const ag::Var& s1 = g.loss_weights.at(kWeightS1);
    if (configs.disable_reconstruction) {
        // Contrastive branch only; s2 stays out of the objective.
        g.l2 = ag::constant(Tensor::scalar(0.0));
        g.total = ag::add(ag::mul(ag::exp(ag::scale(s1, -1.0)), g.l1), s1);
    } else {
        g.l2 = ag::average(l2_terms);
        g.total = combine_losses(g.l1, g.l2, s1, g.loss_weights.at(kWeightS2));
    }
    return g;
}

StepLog pretrain_step(TwinState& state, std::span<const Tensor> batch, const PretrainHyper& hyper,
                      const PretrainConfigs& configs) {
    if (state.step >= state.total_steps) {
        throw Error("pretrain_step: step " + std::to_string(state.step) + " reached total_steps");
    }
    LossGraph g = build_loss(state, batch, hyper, configs);
    ag::backward(g.total);

    StepLog log;
    log.step = state.step;
    log.l1 = g.l1.item();
    log.l2 = g.l2.item();
    log.total = g.total.item();
    log.entropy = g.teacher_entropy;
    log.teacher_mean = g.teacher_mean;
    log.lambda = cosine_momentum(state.step, state.total_steps, hyper.lambda_base);

    // Student, decoder and loss weights share one optimizer; names never collide.
    ParameterSet grads = collect_gradients(g.student);
    if (!configs.disable_reconstruction) grads.merge(collect_gradients(g.decoder));
    ParameterSet weight_grads = collect_gradients(g.loss_weights);
    if (configs.disable_reconstruction) weight_grads = weight_grads.with_prefix(kWeightS1);
    grads.merge(weight_grads);

    ParameterSet trainable = state.student;
    trainable.merge(state.decoder);
    trainable.merge(state.loss_weights);
    state.optimizer.set_learning_rate(hyper.learning_rate);
    log.skipped = !state.optimizer.step(trainable, grads);
    if (!log.skipped) {
        for (auto& [name, t] : state.student) t = trainable.at(name);
        for (auto& [name, t] : state.decoder) t = trainable.at(name);
        for (auto& [name, t] : state.loss_weights) t = trainable.at(name);
        state.teacher = ema_update_params(state.teacher, state.student, log.lambda);
        if (!configs.disable_centering) state.center = update_center(g.center, g.teacher_logits, hyper.center_momentum);
    }
    // A skipped step still advances the schedules.
    ++state.step;
    return log;
}

}  // namespace bda::pretrain
