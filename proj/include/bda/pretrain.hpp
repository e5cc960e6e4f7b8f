#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bda/augment.hpp"
#include "bda/autograd.hpp"
#include "bda/encoder.hpp"
#include "bda/params.hpp"
#include "bda/recon.hpp"

// Stage-1 self-supervised pre-training: a student/teacher pair that agrees
// across two augmented views (sharpening + centering, EMA teacher), plus an
// image reconstruction branch on the student's features, with learnable
// per-task loss weights.
namespace bda::pretrain {

struct ProjectorConfig {
    std::size_t hidden_dim = 256;
    std::size_t output_dim = 256;  // K
    std::size_t num_layers = 3;

    void validate() const;
};

struct PretrainHyper {
    double tau_s = 0.1;
    double tau_t = 0.04;
    double lambda_base = 0.996;
    double center_momentum = 0.9;
    double learning_rate = 1e-4;
    std::size_t batch_size = 8;

    void validate() const;
};

struct PretrainConfigs {
    encoder::EncoderConfig encoder;
    ProjectorConfig projector;
    recon::DecoderConfig decoder;
    augment::AugmentConfig augment;
    bool disable_reconstruction = false;
    bool disable_centering = false;
    std::uint64_t seed = 0;

    void validate() const;
};

inline constexpr const char* kProjectorPrefix = "projector.";
inline constexpr const char* kWeightS1 = "loss.s1";
inline constexpr const char* kWeightS2 = "loss.s2";

// The full mutable state of the twin-network trainer.
struct TwinState {
    ParameterSet student;       // encoder.* + projector.*
    ParameterSet teacher;       // same names and shapes as student
    ParameterSet decoder;       // decoder.*
    ParameterSet loss_weights;  // loss.s1, loss.s2 (lambda_i = exp(-s_i))
    Tensor center;              // (K)
    std::int64_t step = 0;
    std::int64_t total_steps = 0;
    Adam optimizer;

    void validate() const;
};

struct StepLog {
    std::int64_t step = 0;  // step index the log describes (before increment)
    double l1 = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    double lambda = 0.0;
    double entropy = 0.0;         // mean Shannon entropy of the teacher distributions
    bool skipped = false;         // optimizer step skipped on a non-finite gradient
    Tensor teacher_mean;          // batch mean of teacher distributions (K)

    std::string to_json_line() const;
};

ParameterSet init_projector_params(const ProjectorConfig& config, std::size_t in_dim, std::uint64_t seed);
TwinState init_state(const PretrainConfigs& configs, const PretrainHyper& hyper, std::int64_t total_steps);

// Global-average-pools the final stage map and applies the projector MLP. The
// last layer is a cosine layer: its input and each weight column are scaled
// to unit norm, so logits (less bias) lie in [-1, 1].
ag::Var project(const ag::Var& final_map, const ProjectorConfig& config, const ag::VarTable& params);
Tensor project(const encoder::FeaturePyramid& pyramid, const ProjectorConfig& config, const ParameterSet& params);

// softmax((logits - center) / tau).
Tensor sharpen(const Tensor& logits, double tau, const Tensor* center = nullptr);
// -sum p_t log(p_s + 1e-12); both arguments must lie on the simplex.
double contrastive_loss(const Tensor& p_s, const Tensor& p_t);
// 1 - (1 - lambda_base) (cos(pi t / T) + 1) / 2.
double cosine_momentum(std::int64_t step, std::int64_t total_steps, double lambda_base);
ParameterSet ema_update_params(const ParameterSet& teacher, const ParameterSet& student, double lam);
// C <- m C + (1 - m) * column mean of teacher logits (batch x K).
Tensor update_center(const Tensor& center, const Tensor& teacher_logits, double momentum);
// exp(-s1) L1 + s1 + exp(-s2) L2 + s2.
ag::Var combine_losses(const ag::Var& l1, const ag::Var& l2, const ag::Var& s1, const ag::Var& s2);
double combine_losses(double l1, double l2, double s1, double s2);

// One forward pass of the objective over a batch, exposed for inspection.
struct LossGraph {
    ag::Var total, l1, l2;
    ag::VarTable student, teacher, decoder, loss_weights;
    Tensor teacher_logits;  // (batch, K) pre-softmax
    Tensor teacher_mean;    // (K)
    Tensor center;          // (K) the center the teacher was sharpened with
    double teacher_entropy = 0.0;
};

// Views for sample i of the batch at state.step are drawn from
// augment::sample_seed(seed, step * batch_size + i). With bind_teacher_grad the
// teacher leaves are bound as differentiable so tests can confirm no gradient
// reaches them.
LossGraph build_loss(const TwinState& state, std::span<const Tensor> batch, const PretrainHyper& hyper,
                     const PretrainConfigs& configs, bool bind_teacher_grad = false);

// Runs one step: loss, gradient step on student + decoder + loss weights, EMA
// teacher update with the cosine momentum, center update, step increment. At
// step 0 the center starts from the batch mean of the teacher logits; with
// centering disabled it stays zero.
StepLog pretrain_step(TwinState& state, std::span<const Tensor> batch, const PretrainHyper& hyper,
                      const PretrainConfigs& configs);

}  // namespace bda::pretrain
