#include "bda/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "bda/error.hpp"
#include "bda/kernels.hpp"

namespace bda::ag {

namespace {

using kernels::Trans;

void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
    if (a.value().rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
    }
}

Tensor& grad_of(Node& out, std::size_t input) { return out.inputs[input]->grad_buffer(); }
bool wants(const Node& out, std::size_t input) { return out.inputs[input]->requires_grad; }

}  // namespace

Var add(const Var& a, const Var& b) {
    same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!wants(n, k)) continue;
            Tensor& g = grad_of(n, k);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& n) {
        if (wants(n, 0)) {
            Tensor& g = grad_of(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (wants(n, 1)) {
            Tensor& g = grad_of(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.inputs[0]->value;
        const Tensor& bv = n.inputs[1]->value;
        if (wants(n, 0)) {
            Tensor& g = grad_of(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (wants(n, 1)) {
            Tensor& g = grad_of(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.values()) v *= s;
    return make_result(std::move(out), {a}, [s](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    });
}

Var exp(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.values()) v = std::exp(v);
    return make_result(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i];
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return make_result(Tensor::scalar(s), {a}, [](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (auto& v : g.values()) v += n.grad[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var average(const std::vector<Var>& values) {
    if (values.empty()) throw ShapeError("average of an empty list");
    Var acc = values.front();
    for (std::size_t i = 1; i < values.size(); ++i) acc = add(acc, values[i]);
    return scale(acc, 1.0 / static_cast<double>(values.size()));
}

Var reshape(const Var& a, Shape shape) {
    return make_result(a.value().reshaped(std::move(shape)), {a}, [](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out({m, n}, 0.0);
    kernels::gemm(Trans::No, Trans::No, m, n, k, a.value().data(), b.value().data(), out.data());
    return make_result(std::move(out), {a, b}, [m, n, k](Node& node) {
        const Tensor& av = node.inputs[0]->value;
        const Tensor& bv = node.inputs[1]->value;
        if (wants(node, 0)) kernels::gemm(Trans::No, Trans::Yes, m, k, n, node.grad.data(), bv.data(), grad_of(node, 0).data());
        if (wants(node, 1)) kernels::gemm(Trans::Yes, Trans::No, k, n, m, av.data(), node.grad.data(), grad_of(node, 1).data());
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::size_t rows = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
    if (w.shape()[0] != in) {
        throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " +
                         shape_str(w.shape()));
    }
    const bool has_bias = static_cast<bool>(bias);
    if (has_bias && bias.shape() != Shape{out_dim}) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " for output width " +
                         std::to_string(out_dim));
    }
    Tensor out({rows, out_dim}, 0.0);
    if (has_bias) {
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(bias.value().data(), bias.value().data() + out_dim, out.data() + r * out_dim);
    }
    kernels::gemm(Trans::No, Trans::No, rows, out_dim, in, x.value().data(), w.value().data(), out.data());
    std::vector<Var> inputs{x, w};
    if (has_bias) inputs.push_back(bias);
    return make_result(std::move(out), std::move(inputs), [rows, in, out_dim, has_bias](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        const Tensor& wv = n.inputs[1]->value;
        if (wants(n, 0)) kernels::gemm(Trans::No, Trans::Yes, rows, in, out_dim, n.grad.data(), wv.data(), grad_of(n, 0).data());
        if (wants(n, 1)) kernels::gemm(Trans::Yes, Trans::No, in, out_dim, rows, xv.data(), n.grad.data(), grad_of(n, 1).data());
        if (has_bias && wants(n, 2)) {
            Tensor& gb = grad_of(n, 2);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < out_dim; ++j) gb[j] += n.grad[r * out_dim + j];
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const std::size_t rows = x.shape()[0], width = x.shape()[1];
    if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
        throw ShapeError("layer_norm: affine parameters must have shape (" + std::to_string(width) + ")");
    }
    auto xhat = std::make_shared<Tensor>(x.shape());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    Tensor out(x.shape());
    const double* xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += xv[r * width + j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            double d = xv[r * width + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(width);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < width; ++j) {
            double h = (xv[r * width + j] - mu) * is;
            (*xhat)[r * width + j] = h;
            out[r * width + j] = h * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_result(std::move(out), {x, gamma, beta}, [rows, width, xhat, inv_std](Node& n) {
        const Tensor& g = n.inputs[1]->value;
        if (wants(n, 1) || wants(n, 2)) {
            Tensor* gg = wants(n, 1) ? &grad_of(n, 1) : nullptr;
            Tensor* gb = wants(n, 2) ? &grad_of(n, 2) : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < width; ++j) {
                    const double dy = n.grad[r * width + j];
                    if (gg) (*gg)[j] += dy * (*xhat)[r * width + j];
                    if (gb) (*gb)[j] += dy;
                }
        }
        if (wants(n, 0)) {
            Tensor& gx = grad_of(n, 0);
            const double inv_w = 1.0 / static_cast<double>(width);
            for (std::size_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < width; ++j) {
                    const double dh = n.grad[r * width + j] * g[j];
                    m1 += dh;
                    m2 += dh * (*xhat)[r * width + j];
                }
                m1 *= inv_w;
                m2 *= inv_w;
                for (std::size_t j = 0; j < width; ++j) {
                    const double dh = n.grad[r * width + j] * g[j];
                    gx[r * width + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * width + j] * m2);
                }
            }
        }
    });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return make_result(std::move(out), {x}, [](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        Tensor& g = grad_of(n, 0);
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += n.grad[i] * (cdf + v * pdf);
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(out), {x}, [](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) g[i] += n.grad[i];
    });
}

Var patchify(const Var& image, std::size_t patch) {
    require_rank(image, 3, "patchify");
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
    if (h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch size " +
                         std::to_string(patch));
    }
    const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
    // index[t * width + f] = flat image index feeding token t, feature f
    auto index = std::make_shared<std::vector<std::size_t>>(gh * gw * width);
    Tensor out({gh * gw, width});
    for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < patch; ++py)
                    for (std::size_t px = 0; px < patch; ++px) {
                        const std::size_t t = ty * gw + tx;
                        const std::size_t f = (ch * patch + py) * patch + px;
                        const std::size_t src = (ch * h + ty * patch + py) * w + tx * patch + px;
                        (*index)[t * width + f] = src;
                        out[t * width + f] = image.value()[src];
                    }
    return make_result(std::move(out), {image}, [index](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += n.grad[i];
    });
}

Var merge_patches(const Var& tokens, std::size_t grid) {
    require_rank(tokens, 2, "merge_patches");
    const std::size_t c = tokens.shape()[1];
    if (tokens.shape()[0] != grid * grid || grid % 2 != 0) {
        throw ShapeError("merge_patches: token count " + std::to_string(tokens.shape()[0]) +
                         " is not an even square grid of side " + std::to_string(grid));
    }
    const std::size_t half = grid / 2;
    // Neighbour order (row offset, column offset): (0,0), (1,0), (0,1), (1,1).
    static constexpr std::size_t dy[4] = {0, 1, 0, 1};
    static constexpr std::size_t dx[4] = {0, 0, 1, 1};
    Tensor out({half * half, 4 * c});
    const Tensor& in = tokens.value();
    for (std::size_t i = 0; i < half; ++i)
        for (std::size_t j = 0; j < half; ++j)
            for (std::size_t q = 0; q < 4; ++q) {
                const std::size_t src = (2 * i + dy[q]) * grid + 2 * j + dx[q];
                std::copy(in.data() + src * c, in.data() + (src + 1) * c, out.data() + (i * half + j) * 4 * c + q * c);
            }
    return make_result(std::move(out), {tokens}, [grid, half, c](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < half; ++i)
            for (std::size_t j = 0; j < half; ++j)
                for (std::size_t q = 0; q < 4; ++q) {
                    const std::size_t src = (2 * i + dy[q]) * grid + 2 * j + dx[q];
                    const double* go = n.grad.data() + (i * half + j) * 4 * c + q * c;
                    for (std::size_t k = 0; k < c; ++k) g[src * c + k] += go[k];
                }
    });
}

Var tokens_to_map(const Var& tokens, std::size_t grid) {
    require_rank(tokens, 2, "tokens_to_map");
    const std::size_t n_tok = tokens.shape()[0], c = tokens.shape()[1];
    if (n_tok != grid * grid) throw ShapeError("tokens_to_map: token count does not match grid");
    Tensor out({c, grid, grid});
    for (std::size_t t = 0; t < n_tok; ++t)
        for (std::size_t k = 0; k < c; ++k) out[k * n_tok + t] = tokens.value()[t * c + k];
    return make_result(std::move(out), {tokens}, [n_tok, c](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t t = 0; t < n_tok; ++t)
            for (std::size_t k = 0; k < c; ++k) g[t * c + k] += n.grad[k * n_tok + t];
    });
}

WindowGeometry make_window_geometry(std::size_t grid, std::size_t window, std::size_t shift) {
    if (window == 0 || grid % window != 0) {
        throw ShapeError("token grid " + std::to_string(grid) + " not divisible by window size " +
                         std::to_string(window));
    }
    if (shift >= window) throw ShapeError("window shift must be smaller than the window size");
    WindowGeometry geo;
    geo.grid = grid;
    geo.window = window;
    geo.shift = shift;
    const std::size_t per_side = grid / window;
    const std::size_t t = window * window;
    geo.token_of_slot.resize(per_side * per_side * t);
    geo.region_of_slot.resize(per_side * per_side * t);
    // Slots address the cyclically rolled grid; region ids separate tokens that
    // were not neighbours before the roll.
    auto band = [&](std::size_t r) -> int {
        if (shift == 0) return 0;
        if (r < grid - window) return 0;
        if (r < grid - shift) return 1;
        return 2;
    };
    for (std::size_t wy = 0; wy < per_side; ++wy)
        for (std::size_t wx = 0; wx < per_side; ++wx)
            for (std::size_t iy = 0; iy < window; ++iy)
                for (std::size_t ix = 0; ix < window; ++ix) {
                    const std::size_t slot = (wy * per_side + wx) * t + iy * window + ix;
                    const std::size_t ry = wy * window + iy, rx = wx * window + ix;
                    const std::size_t oy = (ry + shift) % grid, ox = (rx + shift) % grid;
                    geo.token_of_slot[slot] = static_cast<int>(oy * grid + ox);
                    geo.region_of_slot[slot] = 3 * band(ry) + band(rx);
                }
    return geo;
}

Var window_attention(const Var& qkv, const WindowGeometry& geometry, std::size_t heads,
                     std::shared_ptr<Tensor>* probs_out) {
    require_rank(qkv, 2, "window_attention");
    const std::size_t n_tok = qkv.shape()[0], c3 = qkv.shape()[1];
    if (n_tok != geometry.grid * geometry.grid) throw ShapeError("window_attention: token count does not match grid");
    if (c3 % 3 != 0 || (c3 / 3) % heads != 0) {
        throw ShapeError("window_attention: width " + std::to_string(c3) + " is not 3 x heads x head_dim");
    }
    const std::size_t c = c3 / 3;
    auto token_of_slot = std::make_shared<std::vector<int>>(geometry.token_of_slot);
    auto region_of_slot = std::make_shared<std::vector<int>>(geometry.region_of_slot);
    const std::size_t windows = geometry.windows(), tokens = geometry.tokens();
    auto probs = std::make_shared<Tensor>(Shape{windows, heads, tokens, tokens});
    Tensor out({n_tok, c});
    kernels::WindowLayout layout{windows, tokens, heads, c, *token_of_slot, *region_of_slot};
    kernels::window_attention(layout, qkv.value().data(), out.data(), probs->data());
    if (probs_out) *probs_out = probs;
    return make_result(std::move(out), {qkv}, [=](Node& n) {
        kernels::WindowLayout l{windows, tokens, heads, c, *token_of_slot, *region_of_slot};
        kernels::window_attention_backward(l, n.inputs[0]->value.data(), probs->data(), n.grad.data(),
                                           grad_of(n, 0).data());
    });
}

Var conv2d(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    const std::size_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const std::size_t co = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != ci || w.shape()[3] != k || k % 2 == 0) {
        throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    }
    if (bias.shape() != Shape{co}) throw ShapeError("conv2d: bias must have shape (" + std::to_string(co) + ")");
    const std::size_t hw = h * wd, rows = ci * k * k;
    std::shared_ptr<Tensor> cols;
    if (k > 1) {
        cols = std::make_shared<Tensor>(Shape{rows, hw});
        kernels::im2col(x.value().data(), ci, h, wd, k, cols->data());
    }
    const double* patches = k > 1 ? cols->data() : x.value().data();
    Tensor out({co, h, wd});
    for (std::size_t o = 0; o < co; ++o) std::fill(out.data() + o * hw, out.data() + (o + 1) * hw, bias.value()[o]);
    kernels::gemm(Trans::No, Trans::No, co, hw, rows, w.value().data(), patches, out.data());
    return make_result(std::move(out), {x, w, bias}, [=](Node& n) {
        const double* p = k > 1 ? cols->data() : n.inputs[0]->value.data();
        if (wants(n, 1)) kernels::gemm(Trans::No, Trans::Yes, co, rows, hw, n.grad.data(), p, grad_of(n, 1).data());
        if (wants(n, 2)) {
            Tensor& gb = grad_of(n, 2);
            for (std::size_t o = 0; o < co; ++o) {
                double s = 0.0;
                for (std::size_t i = 0; i < hw; ++i) s += n.grad[o * hw + i];
                gb[o] += s;
            }
        }
        if (wants(n, 0)) {
            const double* wv = n.inputs[1]->value.data();
            if (k == 1) {
                kernels::gemm(Trans::Yes, Trans::No, rows, hw, co, wv, n.grad.data(), grad_of(n, 0).data());
            } else {
                Tensor dcols({rows, hw}, 0.0);
                kernels::gemm(Trans::Yes, Trans::No, rows, hw, co, wv, n.grad.data(), dcols.data());
                kernels::col2im(dcols.data(), ci, h, wd, k, grad_of(n, 0).data());
            }
        }
    });
}

Var depthwise_conv3x3(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 3, "depthwise_conv3x3");
    const std::size_t c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    if (w.shape() != Shape{c, 3, 3} || bias.shape() != Shape{c}) {
        throw ShapeError("depthwise_conv3x3: parameters incompatible with input " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    kernels::depthwise_conv3x3(x.value().data(), w.value().data(), bias.value().data(), c, h, wd, out.data());
    return make_result(std::move(out), {x, w, bias}, [c, h, wd](Node& n) {
        Tensor dx(n.inputs[0]->value.shape(), 0.0), dw(n.inputs[1]->value.shape(), 0.0), db({c}, 0.0);
        kernels::depthwise_conv3x3_backward(n.inputs[0]->value.data(), n.inputs[1]->value.data(), n.grad.data(),
                                            c, h, wd, dx.data(), dw.data(), db.data());
        const Tensor* parts[3] = {&dx, &dw, &db};
        for (std::size_t k = 0; k < 3; ++k) {
            if (!wants(n, k)) continue;
            Tensor& g = grad_of(n, k);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*parts[k])[i];
        }
    });
}

Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
    require_rank(x, 3, "upsample_bilinear");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (h == out_h && w == out_w) return x;
    Tensor out({c, out_h, out_w});
    kernels::upsample_bilinear(x.value().data(), c, h, w, out_h, out_w, out.data());
    return make_result(std::move(out), {x}, [c, h, w, out_h, out_w](Node& n) {
        kernels::upsample_bilinear_backward(n.grad.data(), c, h, w, out_h, out_w, grad_of(n, 0).data());
    });
}

Var adaptive_avg_pool(const Var& x, std::size_t bins) {
    require_rank(x, 3, "adaptive_avg_pool");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (bins == 0 || bins > h || bins > w) throw ShapeError("adaptive_avg_pool: invalid bin count");
    auto lo = [](std::size_t i, std::size_t in, std::size_t b) { return i * in / b; };
    auto hi = [](std::size_t i, std::size_t in, std::size_t b) { return ((i + 1) * in + b - 1) / b; };
    Tensor out({c, bins, bins});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < bins; ++by)
            for (std::size_t bx = 0; bx < bins; ++bx) {
                double s = 0.0;
                const std::size_t y0 = lo(by, h, bins), y1 = hi(by, h, bins);
                const std::size_t x0 = lo(bx, w, bins), x1 = hi(bx, w, bins);
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx) s += x.value().at(ch, y, xx);
                out.at(ch, by, bx) = s / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    return make_result(std::move(out), {x}, [=](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t by = 0; by < bins; ++by)
                for (std::size_t bx = 0; bx < bins; ++bx) {
                    const std::size_t y0 = lo(by, h, bins), y1 = hi(by, h, bins);
                    const std::size_t x0 = lo(bx, w, bins), x1 = hi(bx, w, bins);
                    const double v = n.grad.at(ch, by, bx) / static_cast<double>((y1 - y0) * (x1 - x0));
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) g.at(ch, y, xx) += v;
                }
    });
}

Var concat_channels(const std::vector<Var>& maps) {
    if (maps.empty()) throw ShapeError("concat_channels: no inputs");
    const std::size_t h = maps[0].shape().at(1), w = maps[0].shape().at(2);
    std::size_t total = 0;
    for (const auto& m : maps) {
        require_rank(m, 3, "concat_channels");
        if (m.shape()[1] != h || m.shape()[2] != w) {
            throw ShapeError("concat_channels: spatial mismatch " + shape_str(m.shape()) + " vs " +
                             shape_str(maps[0].shape()));
        }
        total += m.shape()[0];
    }
    Tensor out({total, h, w});
    std::size_t offset = 0;
    for (const auto& m : maps) {
        std::copy(m.value().data(), m.value().data() + m.value().size(), out.data() + offset);
        offset += m.value().size();
    }
    return make_result(std::move(out), maps, [](Node& n) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const std::size_t len = n.inputs[k]->value.size();
            if (wants(n, k)) {
                Tensor& g = grad_of(n, k);
                for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
            }
            off += len;
        }
    });
}

Var global_avg_pool(const Var& x) {
    require_rank(x, 3, "global_avg_pool");
    const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x.value()[ch * hw + i];
        out[ch] = s / static_cast<double>(hw);
    }
    return make_result(std::move(out), {x}, [c, hw](Node& n) {
        Tensor& g = grad_of(n, 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double v = n.grad[ch] / static_cast<double>(hw);
            for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += v;
        }
    });
}

Var tempered_softmax(const Var& logits, double tau, const Tensor* center) {
    require_rank(logits, 1, "tempered_softmax");
    if (!(tau > 0.0)) throw NumericError("softmax temperature must be positive");
    const std::size_t k = logits.value().size();
    if (center && center->size() != k) {
        throw ShapeError("tempered_softmax: center length " + std::to_string(center->size()) +
                         " does not match logits length " + std::to_string(k));
    }
    Tensor out({k});
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
        out[i] = (logits.value()[i] - (center ? (*center)[i] : 0.0)) / tau;
        mx = std::max(mx, out[i]);
    }
    double z = 0.0;
    for (auto& v : out.values()) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : out.values()) v /= z;
    return make_result(std::move(out), {logits}, [tau, k](Node& n) {
        double dot = 0.0;
        for (std::size_t i = 0; i < k; ++i) dot += n.grad[i] * n.value[i];
        Tensor& g = grad_of(n, 0);
        for (std::size_t i = 0; i < k; ++i) g[i] += n.value[i] * (n.grad[i] - dot) / tau;
    });
}

Var soft_cross_entropy(const Var& probs, const Tensor& target, double eps) {
    if (probs.value().size() != target.size()) {
        throw ShapeError("soft_cross_entropy: length mismatch " + std::to_string(probs.value().size()) + " vs " +
                         std::to_string(target.size()));
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) loss -= target[i] * std::log(probs.value()[i] + eps);
    auto t = std::make_shared<Tensor>(target);
    return make_result(Tensor::scalar(loss), {probs}, [t, eps](Node& n) {
        Tensor& g = grad_of(n, 0);
        const Tensor& p = n.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[0] * (*t)[i] / (p[i] + eps);
    });
}

Var normalize_columns(const Var& x, double eps) {
    require_rank(x, 2, "normalize_columns");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Tensor out(x.shape());
    std::vector<double> norms(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) norms[c] += x.value()[r * cols + c] * x.value()[r * cols + c];
    for (auto& v : norms) v = std::max(std::sqrt(v), eps);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] / norms[c];
    return make_result(std::move(out), {x}, [rows, cols, norms, eps](Node& n) {
        Tensor& g = grad_of(n, 0);
        const Tensor& y = n.value;
        for (std::size_t c = 0; c < cols; ++c) {
            // Below eps the norm is the constant eps and the map is linear.
            double dot = 0.0;
            if (norms[c] > eps)
                for (std::size_t r = 0; r < rows; ++r) dot += y[r * cols + c] * n.grad[r * cols + c];
            for (std::size_t r = 0; r < rows; ++r)
                g[r * cols + c] += (n.grad[r * cols + c] - y[r * cols + c] * dot) / norms[c];
        }
    });
}

Var mean_abs_error(const Var& a, const Var& b) {
    same_shape(a, b, "mean_abs_error");
    const std::size_t count = a.value().size();
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) s += std::abs(a.value()[i] - b.value()[i]);
    return make_result(Tensor::scalar(s / static_cast<double>(count)), {a, b}, [count](Node& n) {
        const Tensor& av = n.inputs[0]->value;
        const Tensor& bv = n.inputs[1]->value;
        const double scale_ = n.grad[0] / static_cast<double>(count);
        for (std::size_t k = 0; k < 2; ++k) {
            if (!wants(n, k)) continue;
            Tensor& g = grad_of(n, k);
            const double sign = k == 0 ? 1.0 : -1.0;
            for (std::size_t i = 0; i < count; ++i) {
                const double d = av[i] - bv[i];
                if (d > 0.0) g[i] += sign * scale_;
                else if (d < 0.0) g[i] -= sign * scale_;
            }
        }
    });
}

Var dice_ce(const Var& scores, std::span<const std::uint8_t> labels, std::span<const double> class_weights,
            double dice_eps) {
    require_rank(scores, 3, "dice_ce");
    const std::size_t k = scores.shape()[0], px = scores.shape()[1] * scores.shape()[2];
    if (labels.size() != px) {
        throw ShapeError("dice_ce: target has " + std::to_string(labels.size()) + " pixels, prediction has " +
                         std::to_string(px));
    }
    if (!class_weights.empty() && class_weights.size() != k) throw ShapeError("dice_ce: class weight count");
    std::vector<double> cw(k, 1.0);
    if (!class_weights.empty()) cw.assign(class_weights.begin(), class_weights.end());
    double cw_sum = 0.0;
    for (double v : cw) cw_sum += v;

    auto probs = std::make_shared<std::vector<double>>(k * px);
    const double* s = scores.value().data();
    double ce = 0.0, pixel_weight = 0.0;
    for (std::size_t p = 0; p < px; ++p) {
        if (labels[p] >= k) throw DataError("dice_ce: label " + std::to_string(labels[p]) + " out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, s[c * px + p]);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(s[c * px + p] - mx);
        for (std::size_t c = 0; c < k; ++c) (*probs)[c * px + p] = std::exp(s[c * px + p] - mx) / z;
        const double w = cw[labels[p]];
        ce -= w * (s[labels[p] * px + p] - mx - std::log(z));
        pixel_weight += w;
    }
    ce /= pixel_weight;

    std::vector<double> inter(k, 0.0), psum(k, 0.0), tsum(k, 0.0);
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t p = 0; p < px; ++p) {
            const double pr = (*probs)[c * px + p];
            psum[c] += pr;
            if (labels[p] == c) {
                inter[c] += pr;
                tsum[c] += 1.0;
            }
        }
    double dice = 0.0;
    for (std::size_t c = 0; c < k; ++c)
        dice += cw[c] / cw_sum * (2.0 * inter[c] + dice_eps) / (psum[c] + tsum[c] + dice_eps);

    auto lab = std::make_shared<std::vector<std::uint8_t>>(labels.begin(), labels.end());
    return make_result(Tensor::scalar(ce + 1.0 - dice), {scores}, [=](Node& n) {
        Tensor& g = grad_of(n, 0);
        const double up = n.grad[0];
        std::vector<double> gp(k);
        for (std::size_t p = 0; p < px; ++p) {
            // d(-dice)/dp_c at this pixel
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const double den = psum[c] + tsum[c] + dice_eps;
                const double t = (*lab)[p] == c ? 1.0 : 0.0;
                gp[c] = -cw[c] / cw_sum * (2.0 * t * den - (2.0 * inter[c] + dice_eps)) / (den * den);
                dot += gp[c] * (*probs)[c * px + p];
            }
            const double w = cw[(*lab)[p]] / pixel_weight;
            for (std::size_t c = 0; c < k; ++c) {
                const double pr = (*probs)[c * px + p];
                const double t = (*lab)[p] == c ? 1.0 : 0.0;
                g[c * px + p] += up * (pr * (gp[c] - dot) + w * (pr - t));
            }
        }
    });
}

}  // namespace bda::ag
