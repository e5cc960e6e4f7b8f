#pragma once

#include <cstddef>
#include <span>

// Compute kernels behind the autograd operators. Every kernel has an
// OpenMP-parallel implementation in bda::kernels and a plain serial
// implementation in bda::kernels::reference used by tests and the benchmark.
// Parallel kernels partition work over independent outputs and keep the
// per-output accumulation order of the reference, so both produce identical
// bits for any thread count.

namespace bda::kernels {

enum class Trans { No, Yes };

// C (m x n) += op(A) * op(B) where op(A) is m x k and op(B) is k x n.
// A is stored (m x k) if ta == No else (k x m); B is (k x n) if tb == No else (n x k).
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c);

// Unfold a (channels, h, w) map into (channels * ksize * ksize, h * w) patches with zero padding ksize/2.
void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* cols);
// Adjoint of im2col: accumulates patch gradients back into dx.
void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* dx);

// Per-channel 3x3 convolution with zero padding 1.
void depthwise_conv3x3(const double* x, const double* weight, const double* bias, std::size_t channels,
                       std::size_t h, std::size_t w, double* out);
void depthwise_conv3x3_backward(const double* x, const double* weight, const double* dout, std::size_t channels,
                                std::size_t h, std::size_t w, double* dx, double* dweight, double* dbias);

// Bilinear resize with half-pixel centres (align_corners = false).
void upsample_bilinear(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t oh,
                       std::size_t ow, double* out);
void upsample_bilinear_backward(const double* dout, std::size_t channels, std::size_t h, std::size_t w,
                                std::size_t oh, std::size_t ow, double* dx);

// Windowed multi-head self-attention over a token grid.
struct WindowLayout {
    std::size_t windows = 0;   // number of windows
    std::size_t tokens = 0;    // tokens per window (window_size^2)
    std::size_t heads = 0;
    std::size_t dim = 0;       // channels C; head width is dim / heads
    // token_of_slot[w * tokens + j]: grid token index occupying slot j of window w.
    std::span<const int> token_of_slot;
    // region_of_slot: attention is allowed only between slots with equal region id.
    std::span<const int> region_of_slot;
};

// qkv: (N, 3C) rows [q | k | v]; out: (N, C); probs: (windows, heads, tokens, tokens).
void window_attention(const WindowLayout& layout, const double* qkv, double* out, double* probs);
// Accumulates into dqkv.
void window_attention_backward(const WindowLayout& layout, const double* qkv, const double* probs,
                               const double* dout, double* dqkv);

namespace reference {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c);
void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* cols);
void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* dx);
void depthwise_conv3x3(const double* x, const double* weight, const double* bias, std::size_t channels,
                       std::size_t h, std::size_t w, double* out);
void depthwise_conv3x3_backward(const double* x, const double* weight, const double* dout, std::size_t channels,
                                std::size_t h, std::size_t w, double* dx, double* dweight, double* dbias);
void upsample_bilinear(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t oh,
                       std::size_t ow, double* out);
void upsample_bilinear_backward(const double* dout, std::size_t channels, std::size_t h, std::size_t w,
                                std::size_t oh, std::size_t ow, double* dx);
void window_attention(const WindowLayout& layout, const double* qkv, double* out, double* probs);
void window_attention_backward(const WindowLayout& layout, const double* qkv, const double* probs,
                               const double* dout, double* dqkv);

}  // namespace reference

}  // namespace bda::kernels
