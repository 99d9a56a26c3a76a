// Serial reference implementations used as oracles by the test suite and as
// the baseline in the kernel benchmark. Everything here favours obviousness
// over speed: plain nested loops, no threading, no layout tricks. Production
// code must never link this library.
#pragma once

#include <cstdint>
#include <vector>

#include "dseg/tensor.hpp"

namespace dseg::ref {

// Six plain loops, scalar accumulation, zero padding handled by bounds test.
Tensor4 conv2d_naive(const Tensor4& input, const ConvParams& p);

// Classic scatter-form backward pass: walks every output gradient element and
// scatters into input/weight/bias grads. Serial by construction.
struct ConvGradsRef {
    Tensor4 input;
    Tensor4 weight;
    std::vector<double> bias;
};
ConvGradsRef backward_conv2d_naive(const Tensor4& input, const ConvParams& p,
                                   const Tensor4& out_grad);

// Bilinear interpolation evaluated per output pixel straight from the
// half-pixel mapping, with explicit corner fetches.
Tensor4 bilinear_resize_naive(const Tensor4& input, int out_h, int out_w);

// Softmax computed in long double for an independent precision check.
std::vector<double> softmax_longdouble(const std::vector<double>& values);

// Attention pooling of a single query against per-position keys/values:
//   out = sum_i softmax(q . k_i / scale)_i * v_i
// keys and values are (positions x dim) matrices.
std::vector<double> attention_pool_naive(const std::vector<double>& query,
                                         const Matrix& keys, const Matrix& values,
                                         double scale);

// Per-pixel cosine logits between a feature map and a bank of unit rows,
// computed with explicit normalization at every pixel.
Tensor4 cosine_logits_naive(const Tensor4& features, const Matrix& bank,
                            double temperature);

// Per-class pixel counts from a straight double loop over the two maps.
// Entries: tp[c], gt_total[c] (row sum), pred_total[c] (column sum).
struct PixelCounts {
    std::vector<std::uint64_t> tp;
    std::vector<std::uint64_t> gt_total;
    std::vector<std::uint64_t> pred_total;
};
PixelCounts count_pixels_naive(const LabelMap& gt, const LabelMap& pred,
                               int num_classes, int ignore_index);

// Central finite difference of a scalar function with respect to one entry of
// a parameter vector the function reads through the supplied reference.
template <typename F>
double central_difference(F&& f, double& param, double eps = 1e-6) {
    const double saved = param;
    param = saved + eps;
    const double hi = f();
    param = saved - eps;
    const double lo = f();
    param = saved;
    return (hi - lo) / (2.0 * eps);
}

}  // namespace dseg::ref
