#include "reference.hpp"

#include <algorithm>
#include <cmath>

namespace dseg::ref {

Tensor4 conv2d_naive(const Tensor4& input, const ConvParams& p) {
    p.validate();
    const int oc = p.weight.n, ic = p.weight.c, kh = p.weight.h, kw = p.weight.w;
    const int eff_h = p.dilation * (kh - 1) + 1;
    const int eff_w = p.dilation * (kw - 1) + 1;
    const int oh = (input.h + 2 * p.padding - eff_h) / p.stride + 1;
    const int ow = (input.w + 2 * p.padding - eff_w) / p.stride + 1;
    Tensor4 out(input.n, oc, oh, ow);
    for (int in = 0; in < input.n; ++in)
        for (int co = 0; co < oc; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = p.bias[co];
                    for (int ci = 0; ci < ic; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * p.stride - p.padding + ky * p.dilation;
                                const int ix = ox * p.stride - p.padding + kx * p.dilation;
                                if (iy < 0 || iy >= input.h || ix < 0 || ix >= input.w)
                                    continue;
                                acc += p.weight.at(co, ci, ky, kx) * input.at(in, ci, iy, ix);
                            }
                    out.at(in, co, oy, ox) = acc;
                }
    return out;
}

ConvGradsRef backward_conv2d_naive(const Tensor4& input, const ConvParams& p,
                                   const Tensor4& out_grad) {
    const int oc = p.weight.n, ic = p.weight.c, kh = p.weight.h, kw = p.weight.w;
    ConvGradsRef g;
    g.input = Tensor4(input.n, input.c, input.h, input.w);
    g.weight = Tensor4(oc, ic, kh, kw);
    g.bias.assign(oc, 0.0);
    for (int in = 0; in < out_grad.n; ++in)
        for (int co = 0; co < oc; ++co)
            for (int oy = 0; oy < out_grad.h; ++oy)
                for (int ox = 0; ox < out_grad.w; ++ox) {
                    const double og = out_grad.at(in, co, oy, ox);
                    g.bias[co] += og;
                    for (int ci = 0; ci < ic; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * p.stride - p.padding + ky * p.dilation;
                                const int ix = ox * p.stride - p.padding + kx * p.dilation;
                                if (iy < 0 || iy >= input.h || ix < 0 || ix >= input.w)
                                    continue;
                                g.input.at(in, ci, iy, ix) += og * p.weight.at(co, ci, ky, kx);
                                g.weight.at(co, ci, ky, kx) += og * input.at(in, ci, iy, ix);
                            }
                }
    return g;
}

Tensor4 bilinear_resize_naive(const Tensor4& input, int out_h, int out_w) {
    Tensor4 out(input.n, input.c, out_h, out_w);
    const double sy = static_cast<double>(input.h) / out_h;
    const double sx = static_cast<double>(input.w) / out_w;
    auto fetch = [&](int in, int ci, int y, int x) {
        y = std::clamp(y, 0, input.h - 1);
        x = std::clamp(x, 0, input.w - 1);
        return input.at(in, ci, y, x);
    };
    for (int in = 0; in < input.n; ++in)
        for (int ci = 0; ci < input.c; ++ci)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    const double fy = (oy + 0.5) * sy - 0.5;
                    const double fx = (ox + 0.5) * sx - 0.5;
                    const int y0 = static_cast<int>(std::floor(fy));
                    const int x0 = static_cast<int>(std::floor(fx));
                    const double wy = fy - y0;
                    const double wx = fx - x0;
                    const double v00 = fetch(in, ci, y0, x0);
                    const double v01 = fetch(in, ci, y0, x0 + 1);
                    const double v10 = fetch(in, ci, y0 + 1, x0);
                    const double v11 = fetch(in, ci, y0 + 1, x0 + 1);
                    out.at(in, ci, oy, ox) = v00 * (1 - wy) * (1 - wx) +
                                             v01 * (1 - wy) * wx +
                                             v10 * wy * (1 - wx) + v11 * wy * wx;
                }
    return out;
}

std::vector<double> softmax_longdouble(const std::vector<double>& values) {
    long double m = values[0];
    for (double v : values) m = std::max<long double>(m, v);
    std::vector<long double> e(values.size());
    long double sum = 0.0L;
    for (std::size_t i = 0; i < values.size(); ++i) {
        e[i] = expl(static_cast<long double>(values[i]) - m);
        sum += e[i];
    }
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = static_cast<double>(e[i] / sum);
    return out;
}

std::vector<double> attention_pool_naive(const std::vector<double>& query,
                                         const Matrix& keys, const Matrix& values,
                                         double scale) {
    const int n = keys.rows;
    std::vector<double> scores(n);
    for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int d = 0; d < keys.cols; ++d) dot += query[d] * keys.at(i, d);
        scores[i] = dot / scale;
    }
    const std::vector<double> w = softmax_longdouble(scores);
    std::vector<double> out(values.cols, 0.0);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < values.cols; ++d) out[d] += w[i] * values.at(i, d);
    return out;
}

Tensor4 cosine_logits_naive(const Tensor4& features, const Matrix& bank,
                            double temperature) {
    Tensor4 out(features.n, bank.rows, features.h, features.w);
    for (int in = 0; in < features.n; ++in)
        for (int oy = 0; oy < features.h; ++oy)
            for (int ox = 0; ox < features.w; ++ox) {
                double sq = 0.0;
                for (int d = 0; d < features.c; ++d) {
                    const double v = features.at(in, d, oy, ox);
                    sq += v * v;
                }
                const double inv = 1.0 / std::sqrt(sq);
                for (int r = 0; r < bank.rows; ++r) {
                    double dot = 0.0;
                    for (int d = 0; d < features.c; ++d)
                        dot += features.at(in, d, oy, ox) * inv * bank.at(r, d);
                    out.at(in, r, oy, ox) = dot / temperature;
                }
            }
    return out;
}

PixelCounts count_pixels_naive(const LabelMap& gt, const LabelMap& pred,
                               int num_classes, int ignore_index) {
    PixelCounts pc;
    pc.tp.assign(num_classes, 0);
    pc.gt_total.assign(num_classes, 0);
    pc.pred_total.assign(num_classes, 0);
    for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const int g = gt.ids[i];
        const int p = pred.ids[i];
        if (g == ignore_index) continue;
        pc.gt_total[g] += 1;
        pc.pred_total[p] += 1;
        if (g == p) pc.tp[g] += 1;
    }
    return pc;
}

}  // namespace dseg::ref
