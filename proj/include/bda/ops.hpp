#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "bda/autograd.hpp"

// Differentiable operators. Maps are (C, H, W); token sequences are (N, C).
namespace bda::ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var exp(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Sum of equally shaped values, divided by their count.
Var average(const std::vector<Var>& values);

// Same values, new shape.
Var reshape(const Var& a, Shape shape);

Var matmul(const Var& a, const Var& b);
// x (N, in) * w (in, out) + bias (out); bias may be empty.
Var linear(const Var& x, const Var& w, const Var& bias);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var gelu(const Var& x);
Var relu(const Var& x);

// (3, H, W) image -> (H/p * W/p, 3 p^2) non-overlapping patch rows.
Var patchify(const Var& image, std::size_t patch);
// (G*G, C) -> ((G/2)^2, 4C), concatenating each 2x2 token neighbourhood.
Var merge_patches(const Var& tokens, std::size_t grid);
// (G*G, C) -> (C, G, G).
Var tokens_to_map(const Var& tokens, std::size_t grid);

// Window partition of a square token grid, optionally cyclically shifted.
struct WindowGeometry {
    std::size_t grid = 0;
    std::size_t window = 0;
    std::size_t shift = 0;
    std::vector<int> token_of_slot;
    std::vector<int> region_of_slot;

    std::size_t windows() const { return (grid / window) * (grid / window); }
    std::size_t tokens() const { return window * window; }
};
WindowGeometry make_window_geometry(std::size_t grid, std::size_t window, std::size_t shift);

// qkv (N, 3C) -> (N, C). If probs_out is set it receives the attention
// weights, shaped (windows, heads, tokens, tokens).
Var window_attention(const Var& qkv, const WindowGeometry& geometry, std::size_t heads,
                     std::shared_ptr<Tensor>* probs_out = nullptr);

// x (Ci, H, W), w (Co, Ci, k, k) with odd k, stride 1, zero padding k/2.
Var conv2d(const Var& x, const Var& w, const Var& bias);
// x (C, H, W), w (C, 3, 3).
Var depthwise_conv3x3(const Var& x, const Var& w, const Var& bias);
Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w);
Var adaptive_avg_pool(const Var& x, std::size_t bins);
Var concat_channels(const std::vector<Var>& maps);
Var global_avg_pool(const Var& x);

// softmax((logits - center) / tau) over a vector.
Var tempered_softmax(const Var& logits, double tau, const Tensor* center = nullptr);
// -sum target * log(probs + eps) with target held constant.
Var soft_cross_entropy(const Var& probs, const Tensor& target, double eps = 1e-12);
// Scales each column of a (R, C) matrix to unit L2 norm; norms below eps are taken as eps.
Var normalize_columns(const Var& x, double eps = 1e-12);
Var mean_abs_error(const Var& a, const Var& b);

// Cross-entropy plus (1 - soft Dice) for (K, H, W) scores against integer labels.
Var dice_ce(const Var& scores, std::span<const std::uint8_t> labels, std::span<const double> class_weights,
            double dice_eps = 1.0);

}  // namespace bda::ag
