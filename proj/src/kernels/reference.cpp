// Serial reference kernels. Written for clarity; the parallel versions in
// parallel.cpp must agree with these bit for bit.
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bda/kernels.hpp"

namespace bda::kernels::reference {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
                double bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* cols) {
    const long pad = static_cast<long>(ksize / 2);
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < ksize; ++ky) {
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                double* row = cols + ((c * ksize + ky) * ksize + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        long sy = static_cast<long>(y + ky) - pad;
                        long sx = static_cast<long>(xx + kx) - pad;
                        bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
                        row[y * w + xx] = inside ? x[(c * h + sy) * w + sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* dx) {
    const long pad = static_cast<long>(ksize / 2);
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < ksize; ++ky) {
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                const double* row = cols + ((c * ksize + ky) * ksize + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        long sy = static_cast<long>(y + ky) - pad;
                        long sx = static_cast<long>(xx + kx) - pad;
                        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w)) {
                            dx[(c * h + sy) * w + sx] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

void depthwise_conv3x3(const double* x, const double* weight, const double* bias, std::size_t channels,
                       std::size_t h, std::size_t w, double* out) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                        long sy = static_cast<long>(y) + ky - 1;
                        long sx = static_cast<long>(xx) + kx - 1;
                        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                        s += weight[c * 9 + ky * 3 + kx] * x[(c * h + sy) * w + sx];
                    }
                }
                out[(c * h + y) * w + xx] = s + bias[c];
            }
        }
    }
}

void depthwise_conv3x3_backward(const double* x, const double* weight, const double* dout, std::size_t channels,
                                std::size_t h, std::size_t w, double* dx, double* dweight, double* dbias) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
                double g = dout[(c * h + y) * w + xx];
                dbias[c] += g;
                for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                        long sy = static_cast<long>(y) + ky - 1;
                        long sx = static_cast<long>(xx) + kx - 1;
                        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                        dweight[c * 9 + ky * 3 + kx] += g * x[(c * h + sy) * w + sx];
                        dx[(c * h + sy) * w + sx] += g * weight[c * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
}

namespace {

struct Tap {
    std::size_t i0, i1;
    double frac;
};

Tap source_tap(std::size_t dst, std::size_t in, std::size_t out) {
    double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
    return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace

void upsample_bilinear(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t oh,
                       std::size_t ow, double* out) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            Tap ty = source_tap(oy, h, oh);
            for (std::size_t ox = 0; ox < ow; ++ox) {
                Tap tx = source_tap(ox, w, ow);
                const double* p = x + c * h * w;
                double top = (1.0 - tx.frac) * p[ty.i0 * w + tx.i0] + tx.frac * p[ty.i0 * w + tx.i1];
                double bot = (1.0 - tx.frac) * p[ty.i1 * w + tx.i0] + tx.frac * p[ty.i1 * w + tx.i1];
                out[(c * oh + oy) * ow + ox] = (1.0 - ty.frac) * top + ty.frac * bot;
            }
        }
    }
}

void upsample_bilinear_backward(const double* dout, std::size_t channels, std::size_t h, std::size_t w,
                                std::size_t oh, std::size_t ow, double* dx) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            Tap ty = source_tap(oy, h, oh);
            for (std::size_t ox = 0; ox < ow; ++ox) {
                Tap tx = source_tap(ox, w, ow);
                double g = dout[(c * oh + oy) * ow + ox];
                double* p = dx + c * h * w;
                p[ty.i0 * w + tx.i0] += (1.0 - ty.frac) * (1.0 - tx.frac) * g;
                p[ty.i0 * w + tx.i1] += (1.0 - ty.frac) * tx.frac * g;
                p[ty.i1 * w + tx.i0] += ty.frac * (1.0 - tx.frac) * g;
                p[ty.i1 * w + tx.i1] += ty.frac * tx.frac * g;
            }
        }
    }
}

void window_attention(const WindowLayout& layout, const double* qkv, double* out, double* probs) {
    const std::size_t T = layout.tokens, C = layout.dim, hd = C / layout.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t win = 0; win < layout.windows; ++win) {
        for (std::size_t head = 0; head < layout.heads; ++head) {
            double* P = probs + (win * layout.heads + head) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                const int ti = layout.token_of_slot[win * T + i];
                const int ri = layout.region_of_slot[win * T + i];
                std::vector<double> logits(T, -std::numeric_limits<double>::infinity());
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < T; ++j) {
                    if (layout.region_of_slot[win * T + j] != ri) continue;
                    const int tj = layout.token_of_slot[win * T + j];
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) {
                        s += qkv[ti * 3 * C + head * hd + e] * qkv[tj * 3 * C + C + head * hd + e];
                    }
                    logits[j] = s * scale;
                    mx = std::max(mx, logits[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    P[i * T + j] = std::isinf(logits[j]) ? 0.0 : std::exp(logits[j] - mx);
                    z += P[i * T + j];
                }
                for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < T; ++j) {
                        const int tj = layout.token_of_slot[win * T + j];
                        s += P[i * T + j] * qkv[tj * 3 * C + 2 * C + head * hd + e];
                    }
                    out[ti * C + head * hd + e] = s;
                }
            }
        }
    }
}

void window_attention_backward(const WindowLayout& layout, const double* qkv, const double* probs,
                               const double* dout, double* dqkv) {
    const std::size_t T = layout.tokens, C = layout.dim, hd = C / layout.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t win = 0; win < layout.windows; ++win) {
        for (std::size_t head = 0; head < layout.heads; ++head) {
            const double* P = probs + (win * layout.heads + head) * T * T;
            auto tok = [&](std::size_t j) { return static_cast<std::size_t>(layout.token_of_slot[win * T + j]); };
            // dP[i][j] = dout_i . v_j ; dV_j = sum_i P[i][j] dout_i
            std::vector<double> dP(T * T, 0.0);
            for (std::size_t i = 0; i < T; ++i) {
                for (std::size_t j = 0; j < T; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) {
                        s += dout[tok(i) * C + head * hd + e] * qkv[tok(j) * 3 * C + 2 * C + head * hd + e];
                    }
                    dP[i * T + j] = s;
                }
            }
            for (std::size_t j = 0; j < T; ++j) {
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < T; ++i) s += P[i * T + j] * dout[tok(i) * C + head * hd + e];
                    dqkv[tok(j) * 3 * C + 2 * C + head * hd + e] += s;
                }
            }
            // softmax backward: dS = P * (dP - rowsum(P * dP))
            std::vector<double> dS(T * T, 0.0);
            for (std::size_t i = 0; i < T; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < T; ++j) dot += P[i * T + j] * dP[i * T + j];
                for (std::size_t j = 0; j < T; ++j) dS[i * T + j] = P[i * T + j] * (dP[i * T + j] - dot) * scale;
            }
            for (std::size_t i = 0; i < T; ++i) {
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < T; ++j) s += dS[i * T + j] * qkv[tok(j) * 3 * C + C + head * hd + e];
                    dqkv[tok(i) * 3 * C + head * hd + e] += s;
                }
            }
            for (std::size_t j = 0; j < T; ++j) {
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < T; ++i) s += dS[i * T + j] * qkv[tok(i) * 3 * C + head * hd + e];
                    dqkv[tok(j) * 3 * C + C + head * hd + e] += s;
                }
            }
        }
    }
}

}  // namespace bda::kernels::reference
