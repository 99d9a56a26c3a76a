#pragma once

#include <utility>
#include <vector>

#include "dseg/tensor.hpp"

namespace dseg {

// Numerical kernels. All operations are deterministic: each output element is
// accumulated in a fixed sequential order, so results are bit-identical
// regardless of thread count. Inner loops parallelize over output elements
// only. Serial reference implementations for these kernels live in
// src/ref/reference.hpp and back the test oracles and the benchmark baseline.

// Cross-correlation with stride/dilation/zero-padding.
// Output spatial dims: (in + 2*pad - dilation*(k-1) - 1) / stride + 1.
Tensor4 conv2d(const Tensor4& input, const ConvParams& params);

// Gradients of conv2d with respect to input, weights and bias, given the
// gradient of a scalar loss with respect to the conv output.
struct Conv2dGrads {
    Tensor4 input;
    Tensor4 weight;
    std::vector<double> bias;
};
Conv2dGrads backward_conv2d(const Tensor4& input, const ConvParams& params,
                            const Tensor4& out_grad);

// Numerically stable softmax (max subtraction). Input must be non-empty.
std::vector<double> softmax(const std::vector<double>& values);

// Scales v to unit Euclidean norm. Throws DegenerateVectorError when the norm
// is at or below eps.
std::vector<double> l2_normalize(const std::vector<double>& v, double eps = 1e-12);

// Bilinear resampling, align-corners=false convention with edge clamping.
Tensor4 bilinear_resize(const Tensor4& input, int out_h, int out_w);

// Elementwise max(x, 0).
Tensor4 relu(const Tensor4& input);
// out_grad masked by the ReLU activation pattern of `input`.
Tensor4 relu_backward(const Tensor4& input, const Tensor4& out_grad);

// Mean cross entropy over non-ignored pixels, with the gradient with respect
// to the logits. Ignored pixels contribute zero loss and zero gradient. If
// every pixel is ignored, loss is 0 and the gradient is all zeros.
struct CrossEntropyResult {
    double loss = 0.0;
    Tensor4 logit_grad;
};
CrossEntropyResult cross_entropy(const Tensor4& logits, const LabelMap& labels,
                                 int ignore_index = kIgnoreIndex);

// Momentum SGD: velocity = momentum * velocity + grad; param -= lr * velocity.
// `velocity` must be zero-initialized to the parameter size on first use.
void sgd_update(std::vector<double>& params, const std::vector<double>& grads,
                double lr, double momentum, std::vector<double>& velocity);
void sgd_update(Tensor4& params, const Tensor4& grads, double lr, double momentum,
                Tensor4& velocity);

}  // namespace dseg
