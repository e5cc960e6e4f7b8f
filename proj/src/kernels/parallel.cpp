#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bda/kernels.hpp"

namespace bda::kernels {

namespace {

using Index = long;  // OpenMP loop variables must be signed

}  // namespace

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
    if (tb == Trans::Yes) {
#pragma omp parallel for schedule(static)
        for (Index i = 0; i < static_cast<Index>(m); ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double s = 0.0;
                if (ta == Trans::No) {
                    const double* ai = a + i * k;
                    for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
                } else {
                    for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * bj[p];
                }
                c[i * n + j] += s;
            }
        }
        return;
    }
#pragma omp parallel
    {
        std::vector<double> acc(n);
#pragma omp for schedule(static)
        for (Index i = 0; i < static_cast<Index>(m); ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            double* accp = acc.data();
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
                const double* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) accp[j] += av * bp[j];
            }
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += accp[j];
        }
    }
}

void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* cols) {
    const long pad = static_cast<long>(ksize / 2);
    const std::size_t hw = h * w;
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        const double* xc = x + c * hw;
        for (std::size_t ky = 0; ky < ksize; ++ky) {
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                double* row = cols + ((c * ksize + ky) * ksize + kx) * hw;
                const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                for (long y = 0; y < static_cast<long>(h); ++y) {
                    const long sy = y + dy;
                    double* r = row + y * w;
                    if (sy < 0 || sy >= static_cast<long>(h)) {
                        std::fill(r, r + w, 0.0);
                        continue;
                    }
                    for (long xx = 0; xx < static_cast<long>(w); ++xx) {
                        const long sx = xx + dx;
                        r[xx] = (sx >= 0 && sx < static_cast<long>(w)) ? xc[sy * w + sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, double* dx) {
    const long pad = static_cast<long>(ksize / 2);
    const std::size_t hw = h * w;
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        double* dc = dx + c * hw;
        for (std::size_t ky = 0; ky < ksize; ++ky) {
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                const double* row = cols + ((c * ksize + ky) * ksize + kx) * hw;
                const long oy = static_cast<long>(ky) - pad, ox = static_cast<long>(kx) - pad;
                for (long y = 0; y < static_cast<long>(h); ++y) {
                    const long sy = y + oy;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    for (long xx = 0; xx < static_cast<long>(w); ++xx) {
                        const long sx = xx + ox;
                        if (sx >= 0 && sx < static_cast<long>(w)) dc[sy * w + sx] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

void depthwise_conv3x3(const double* x, const double* weight, const double* bias, std::size_t channels,
                       std::size_t h, std::size_t w, double* out) {
    const long H = static_cast<long>(h), W = static_cast<long>(w);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        const double* xc = x + c * h * w;
        const double* k = weight + c * 9;
        for (long y = 0; y < H; ++y) {
            for (long xx = 0; xx < W; ++xx) {
                double s = 0.0;
                for (long ky = 0; ky < 3; ++ky) {
                    const long sy = y + ky - 1;
                    if (sy < 0 || sy >= H) continue;
                    for (long kx = 0; kx < 3; ++kx) {
                        const long sx = xx + kx - 1;
                        if (sx < 0 || sx >= W) continue;
                        s += k[ky * 3 + kx] * xc[sy * W + sx];
                    }
                }
                out[(c * H + y) * W + xx] = s + bias[c];
            }
        }
    }
}

void depthwise_conv3x3_backward(const double* x, const double* weight, const double* dout, std::size_t channels,
                                std::size_t h, std::size_t w, double* dx, double* dweight, double* dbias) {
    const long H = static_cast<long>(h), W = static_cast<long>(w);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        const double* xc = x + c * h * w;
        const double* k = weight + c * 9;
        double* dxc = dx + c * h * w;
        double* dk = dweight + c * 9;
        for (long y = 0; y < H; ++y) {
            for (long xx = 0; xx < W; ++xx) {
                const double g = dout[(c * H + y) * W + xx];
                dbias[c] += g;
                for (long ky = 0; ky < 3; ++ky) {
                    const long sy = y + ky - 1;
                    if (sy < 0 || sy >= H) continue;
                    for (long kx = 0; kx < 3; ++kx) {
                        const long sx = xx + kx - 1;
                        if (sx < 0 || sx >= W) continue;
                        dk[ky * 3 + kx] += g * xc[sy * W + sx];
                        dxc[sy * W + sx] += g * k[ky * 3 + kx];
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

std::vector<Tap> taps(std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        t[d] = {i0, i0 + 1 < in ? i0 + 1 : i0, src - static_cast<double>(i0)};
    }
    return t;
}

}  // namespace

void upsample_bilinear(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t oh,
                       std::size_t ow, double* out) {
    const auto ty = taps(h, oh), tx = taps(w, ow);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        const double* p = x + c * h * w;
        double* o = out + c * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const Tap& a = ty[oy];
            const double* r0 = p + a.i0 * w;
            const double* r1 = p + a.i1 * w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const Tap& b = tx[ox];
                double top = (1.0 - b.frac) * r0[b.i0] + b.frac * r0[b.i1];
                double bot = (1.0 - b.frac) * r1[b.i0] + b.frac * r1[b.i1];
                o[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    }
}

void upsample_bilinear_backward(const double* dout, std::size_t channels, std::size_t h, std::size_t w,
                                std::size_t oh, std::size_t ow, double* dx) {
    const auto ty = taps(h, oh), tx = taps(w, ow);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(channels); ++c) {
        double* p = dx + c * h * w;
        const double* g = dout + c * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const Tap& b = tx[ox];
                const double v = g[oy * ow + ox];
                p[a.i0 * w + b.i0] += (1.0 - a.frac) * (1.0 - b.frac) * v;
                p[a.i0 * w + b.i1] += (1.0 - a.frac) * b.frac * v;
                p[a.i1 * w + b.i0] += a.frac * (1.0 - b.frac) * v;
                p[a.i1 * w + b.i1] += a.frac * b.frac * v;
            }
        }
    }
}

namespace {

// Gathers one head's q, k, v rows of one window into contiguous (T, hd) blocks.
void gather_head(const WindowLayout& layout, std::size_t win, std::size_t head, const double* qkv, double* q,
                 double* k, double* v) {
    const std::size_t T = layout.tokens, C = layout.dim, hd = C / layout.heads;
    for (std::size_t i = 0; i < T; ++i) {
        const double* row = qkv + static_cast<std::size_t>(layout.token_of_slot[win * T + i]) * 3 * C + head * hd;
        std::copy(row, row + hd, q + i * hd);
        std::copy(row + C, row + C + hd, k + i * hd);
        std::copy(row + 2 * C, row + 2 * C + hd, v + i * hd);
    }
}

}  // namespace

void window_attention(const WindowLayout& layout, const double* qkv, double* out, double* probs) {
    const std::size_t T = layout.tokens, C = layout.dim, hd = C / layout.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Index jobs = static_cast<Index>(layout.windows * layout.heads);
#pragma omp parallel
    {
        std::vector<double> q(T * hd), k(T * hd), v(T * hd), logits(T);
#pragma omp for schedule(static)
        for (Index job = 0; job < jobs; ++job) {
            const std::size_t win = static_cast<std::size_t>(job) / layout.heads;
            const std::size_t head = static_cast<std::size_t>(job) % layout.heads;
            gather_head(layout, win, head, qkv, q.data(), k.data(), v.data());
            const int* region = layout.region_of_slot.data() + win * T;
            double* P = probs + static_cast<std::size_t>(job) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < T; ++j) {
                    if (region[j] != region[i]) continue;
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) s += q[i * hd + e] * k[j * hd + e];
                    logits[j] = s * scale;
                    mx = std::max(mx, logits[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    P[i * T + j] = region[j] == region[i] ? std::exp(logits[j] - mx) : 0.0;
                    z += P[i * T + j];
                }
                for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
                double* o = out + static_cast<std::size_t>(layout.token_of_slot[win * T + i]) * C + head * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < T; ++j) s += P[i * T + j] * v[j * hd + e];
                    o[e] = s;
                }
            }
        }
    }
}

void window_attention_backward(const WindowLayout& layout, const double* qkv, const double* probs,
                               const double* dout, double* dqkv) {
    const std::size_t T = layout.tokens, C = layout.dim, hd = C / layout.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Index jobs = static_cast<Index>(layout.windows * layout.heads);
#pragma omp parallel
    {
        std::vector<double> q(T * hd), k(T * hd), v(T * hd), go(T * hd), dP(T * T), dS(T * T);
#pragma omp for schedule(static)
        for (Index job = 0; job < jobs; ++job) {
            const std::size_t win = static_cast<std::size_t>(job) / layout.heads;
            const std::size_t head = static_cast<std::size_t>(job) % layout.heads;
            gather_head(layout, win, head, qkv, q.data(), k.data(), v.data());
            const int* slot = layout.token_of_slot.data() + win * T;
            for (std::size_t i = 0; i < T; ++i) {
                const double* g = dout + static_cast<std::size_t>(slot[i]) * C + head * hd;
                std::copy(g, g + hd, go.data() + i * hd);
            }
            const double* P = probs + static_cast<std::size_t>(job) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                for (std::size_t j = 0; j < T; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) s += go[i * hd + e] * v[j * hd + e];
                    dP[i * T + j] = s;
                }
            }
            for (std::size_t j = 0; j < T; ++j) {
                double* dv = dqkv + static_cast<std::size_t>(slot[j]) * 3 * C + 2 * C + head * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < T; ++i) s += P[i * T + j] * go[i * hd + e];
                    dv[e] += s;
                }
            }
            for (std::size_t i = 0; i < T; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < T; ++j) dot += P[i * T + j] * dP[i * T + j];
                for (std::size_t j = 0; j < T; ++j) dS[i * T + j] = P[i * T + j] * (dP[i * T + j] - dot) * scale;
            }
            for (std::size_t i = 0; i < T; ++i) {
                double* dq = dqkv + static_cast<std::size_t>(slot[i]) * 3 * C + head * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < T; ++j) s += dS[i * T + j] * k[j * hd + e];
                    dq[e] += s;
                }
            }
            for (std::size_t j = 0; j < T; ++j) {
                double* dk = dqkv + static_cast<std::size_t>(slot[j]) * 3 * C + C + head * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < T; ++i) s += dS[i * T + j] * q[i * hd + e];
                    dk[e] += s;
                }
            }
        }
    }
}

}  // namespace bda::kernels
