#include "dseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dseg {

namespace {

void check_conv_args(const Tensor4& input, const ConvParams& p) {
    p.validate();
    if (input.c != p.weight.c) {
        throw ConfigError("conv2d: input has " + std::to_string(input.c) +
                          " channels, kernel expects " + std::to_string(p.weight.c));
    }
}

struct ConvDims {
    int oh, ow;
};

ConvDims conv_out_dims(const Tensor4& input, const ConvParams& p) {
    int eff_h = p.dilation * (p.weight.h - 1) + 1;
    int eff_w = p.dilation * (p.weight.w - 1) + 1;
    int oh = (input.h + 2 * p.padding - eff_h) / p.stride + 1;
    int ow = (input.w + 2 * p.padding - eff_w) / p.stride + 1;
    if (oh < 1 || ow < 1) {
        throw ConfigError("conv2d: output spatial dims would be empty");
    }
    return {oh, ow};
}

}  // namespace

Tensor4 conv2d(const Tensor4& input, const ConvParams& p) {
    check_conv_args(input, p);
    auto [oh, ow] = conv_out_dims(input, p);
    const int oc = p.weight.n, ic = p.weight.c, kh = p.weight.h, kw = p.weight.w;
    Tensor4 out(input.n, oc, oh, ow);

    // Each output element accumulates over (ic, kh, kw) in a fixed order;
    // parallelism is across output rows only, so results do not depend on the
    // thread count.
    const int total_rows = input.n * oc * oh;
#pragma omp parallel for schedule(static)
    for (int row = 0; row < total_rows; ++row) {
        const int oy = row % oh;
        const int co = (row / oh) % oc;
        const int in = row / (oh * oc);
        double* dst = &out.at(in, co, oy, 0);
        for (int ox = 0; ox < ow; ++ox) dst[ox] = p.bias[co];
        for (int ci = 0; ci < ic; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * p.stride - p.padding + ky * p.dilation;
                if (iy < 0 || iy >= input.h) continue;
                const double* src = input.data.data() + input.index(in, ci, iy, 0);
                for (int kx = 0; kx < kw; ++kx) {
                    const double wv = p.weight.at(co, ci, ky, kx);
                    const int x_off = -p.padding + kx * p.dilation;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * p.stride + x_off;
                        if (ix < 0 || ix >= input.w) continue;
                        dst[ox] += wv * src[ix];
                    }
                }
            }
        }
    }
    check_finite(out, "conv2d");
    return out;
}

Conv2dGrads backward_conv2d(const Tensor4& input, const ConvParams& p,
                            const Tensor4& out_grad) {
    check_conv_args(input, p);
    auto [oh, ow] = conv_out_dims(input, p);
    const int oc = p.weight.n, ic = p.weight.c, kh = p.weight.h, kw = p.weight.w;
    if (out_grad.n != input.n || out_grad.c != oc || out_grad.h != oh || out_grad.w != ow) {
        throw ConfigError("backward_conv2d: out_grad dims do not match conv output");
    }

    Conv2dGrads g;
    g.input = Tensor4(input.n, input.c, input.h, input.w);
    g.weight = Tensor4(oc, ic, kh, kw);
    g.bias.assign(oc, 0.0);

    // Input gradient in gather form: each input pixel sums the contributions
    // of every (oc, ky, kx) that touches it, in that fixed order.
    const int in_rows = input.n * ic * input.h;
#pragma omp parallel for schedule(static)
    for (int row = 0; row < in_rows; ++row) {
        const int iy = row % input.h;
        const int ci = (row / input.h) % ic;
        const int in = row / (input.h * ic);
        double* dst = &g.input.at(in, ci, iy, 0);
        for (int co = 0; co < oc; ++co) {
            for (int ky = 0; ky < kh; ++ky) {
                const int num_y = iy + p.padding - ky * p.dilation;
                if (num_y < 0 || num_y % p.stride != 0) continue;
                const int oy = num_y / p.stride;
                if (oy >= oh) continue;
                const double* og = out_grad.data.data() + out_grad.index(in, co, oy, 0);
                for (int kx = 0; kx < kw; ++kx) {
                    const double wv = p.weight.at(co, ci, ky, kx);
                    for (int ix = kx * p.dilation - p.padding;
                         ix < input.w; ix += p.stride) {
                        if (ix < 0) continue;
                        const int num_x = ix + p.padding - kx * p.dilation;
                        const int ox = num_x / p.stride;
                        if (ox >= ow) break;
                        dst[ix] += wv * og[ox];
                    }
                }
            }
        }
    }

    // Weight gradient: one weight element per task, accumulating over
    // (n, oy, ox) sequentially.
    const int w_elems = oc * ic * kh * kw;
#pragma omp parallel for schedule(static)
    for (int e = 0; e < w_elems; ++e) {
        const int kx = e % kw;
        const int ky = (e / kw) % kh;
        const int ci = (e / (kw * kh)) % ic;
        const int co = e / (kw * kh * ic);
        double acc = 0.0;
        for (int in = 0; in < input.n; ++in) {
            for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * p.stride - p.padding + ky * p.dilation;
                if (iy < 0 || iy >= input.h) continue;
                const double* og = out_grad.data.data() + out_grad.index(in, co, oy, 0);
                const double* src = input.data.data() + input.index(in, ci, iy, 0);
                const int x_off = -p.padding + kx * p.dilation;
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix = ox * p.stride + x_off;
                    if (ix < 0 || ix >= input.w) continue;
                    acc += og[ox] * src[ix];
                }
            }
        }
        g.weight.data[e] = acc;
    }

#pragma omp parallel for schedule(static)
    for (int co = 0; co < oc; ++co) {
        double acc = 0.0;
        for (int in = 0; in < input.n; ++in) {
            for (int oy = 0; oy < oh; ++oy) {
                const double* og = out_grad.data.data() + out_grad.index(in, co, oy, 0);
                for (int ox = 0; ox < ow; ++ox) acc += og[ox];
            }
        }
        g.bias[co] = acc;
    }

    check_finite(g.input, "backward_conv2d input grad");
    check_finite(g.weight, "backward_conv2d weight grad");
    check_finite(g.bias, "backward_conv2d bias grad");
    return g;
}

std::vector<double> softmax(const std::vector<double>& values) {
    if (values.empty()) {
        throw ArgumentError("softmax: empty input");
    }
    const double m = *std::max_element(values.begin(), values.end());
    std::vector<double> out(values.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = std::exp(values[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    check_finite(out, "softmax");
    return out;
}

std::vector<double> l2_normalize(const std::vector<double>& v, double eps) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!(norm > eps)) {
        throw DegenerateVectorError("l2_normalize: norm " + std::to_string(norm) +
                                    " below threshold");
    }
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
}

Tensor4 bilinear_resize(const Tensor4& input, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) {
        throw ArgumentError("bilinear_resize: target size must be >= 1");
    }
    Tensor4 out(input.n, input.c, out_h, out_w);
    const double sy = static_cast<double>(input.h) / out_h;
    const double sx = static_cast<double>(input.w) / out_w;
    const int planes = input.n * input.c;
#pragma omp parallel for schedule(static)
    for (int plane = 0; plane < planes; ++plane) {
        const double* src = input.data.data() +
                            static_cast<std::size_t>(plane) * input.h * input.w;
        double* dst = out.data.data() + static_cast<std::size_t>(plane) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const double fy = (oy + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            const double wy = fy - y0;
            const int y1 = std::clamp(y0 + 1, 0, input.h - 1);
            y0 = std::clamp(y0, 0, input.h - 1);
            for (int ox = 0; ox < out_w; ++ox) {
                const double fx = (ox + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                const double wx = fx - x0;
                const int x1 = std::clamp(x0 + 1, 0, input.w - 1);
                x0 = std::clamp(x0, 0, input.w - 1);
                const double top = src[y0 * input.w + x0] * (1.0 - wx) +
                                   src[y0 * input.w + x1] * wx;
                const double bot = src[y1 * input.w + x0] * (1.0 - wx) +
                                   src[y1 * input.w + x1] * wx;
                dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    check_finite(out, "bilinear_resize");
    return out;
}

Tensor4 relu(const Tensor4& input) {
    Tensor4 out = input;
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(out.data.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        if (out.data[i] < 0.0) out.data[i] = 0.0;
    }
    return out;
}

Tensor4 relu_backward(const Tensor4& input, const Tensor4& out_grad) {
    if (!input.same_dims(out_grad)) {
        throw ConfigError("relu_backward: dim mismatch");
    }
    Tensor4 g = out_grad;
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(g.data.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        if (input.data[i] <= 0.0) g.data[i] = 0.0;
    }
    return g;
}

CrossEntropyResult cross_entropy(const Tensor4& logits, const LabelMap& labels,
                                 int ignore_index) {
    if (labels.n != logits.n || labels.h != logits.h || labels.w != logits.w) {
        throw ConfigError("cross_entropy: label map dims do not match logits");
    }
    const int k = logits.c;
    const int px_per_item = logits.h * logits.w;
    const int total_px = logits.n * px_per_item;

    // Pass 1: count non-ignored pixels and validate labels.
    std::size_t count = 0;
    for (int i = 0; i < total_px; ++i) {
        const int lab = labels.ids[i];
        if (lab == ignore_index) continue;
        if (lab >= k) {
            throw DataError("cross_entropy: label " + std::to_string(lab) +
                            " out of range for " + std::to_string(k) + " classes");
        }
        ++count;
    }

    CrossEntropyResult res;
    res.logit_grad = Tensor4(logits.n, k, logits.h, logits.w);
    if (count == 0) {
        return res;  // all ignored: loss 0, zero gradients
    }

    // Per-pixel loss terms in parallel; the final mean is reduced serially in
    // pixel order so the sum is bit-stable.
    std::vector<double> px_loss(total_px, 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < total_px; ++i) {
        const int lab = labels.ids[i];
        if (lab == ignore_index) continue;
        const int in = i / px_per_item;
        const int rem = i % px_per_item;
        const int iy = rem / logits.w;
        const int ix = rem % logits.w;

        double m = logits.at(in, 0, iy, ix);
        for (int c = 1; c < k; ++c) m = std::max(m, logits.at(in, c, iy, ix));
        double sum = 0.0;
        for (int c = 0; c < k; ++c) sum += std::exp(logits.at(in, c, iy, ix) - m);
        const double lse = m + std::log(sum);
        px_loss[i] = lse - logits.at(in, lab, iy, ix);

        const double inv_count = 1.0 / static_cast<double>(count);
        for (int c = 0; c < k; ++c) {
            const double p = std::exp(logits.at(in, c, iy, ix) - lse);
            res.logit_grad.at(in, c, iy, ix) =
                (p - (c == lab ? 1.0 : 0.0)) * inv_count;
        }
    }
    double loss = 0.0;
    for (int i = 0; i < total_px; ++i) loss += px_loss[i];
    res.loss = loss / static_cast<double>(count);

    if (!std::isfinite(res.loss)) {
        throw DataError("cross_entropy: non-finite loss");
    }
    check_finite(res.logit_grad, "cross_entropy grad");
    return res;
}

void sgd_update(std::vector<double>& params, const std::vector<double>& grads,
                double lr, double momentum, std::vector<double>& velocity) {
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw ConfigError("sgd_update: size mismatch");
    }
    if (lr < 0.0) {
        throw ConfigError("sgd_update: negative learning rate");
    }
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(params.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

void sgd_update(Tensor4& params, const Tensor4& grads, double lr, double momentum,
                Tensor4& velocity) {
    if (!params.same_dims(grads) || !params.same_dims(velocity)) {
        throw ConfigError("sgd_update: shape mismatch");
    }
    sgd_update(params.data, grads.data, lr, momentum, velocity.data);
}

}  // namespace dseg
