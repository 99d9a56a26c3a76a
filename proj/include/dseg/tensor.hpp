#pragma once

#include <cstdint>
#include <vector>

#include "dseg/error.hpp"

namespace dseg {

// Dense 4-axis real array (batch, channel, height, width), row-major with w
// minor. The universal carrier for images, feature maps and logits.
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0);

    std::size_t size() const { return data.size(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix;
    }
    double& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    double at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    bool same_dims(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

// Per-pixel class ids; 255 is reserved as the ignore value.
struct LabelMap {
    int n = 0, h = 0, w = 0;
    std::vector<uint8_t> ids;

    LabelMap() = default;
    LabelMap(int n_, int h_, int w_, uint8_t fill = 0)
        : n(n_), h(h_), w(w_),
          ids(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

    std::size_t index(int in, int iy, int ix) const {
        return (static_cast<std::size_t>(in) * h + iy) * w + ix;
    }
    uint8_t& at(int in, int iy, int ix) { return ids[index(in, iy, ix)]; }
    uint8_t at(int in, int iy, int ix) const { return ids[index(in, iy, ix)]; }
    std::size_t size() const { return ids.size(); }
};

constexpr int kIgnoreIndex = 255;

// Row-major 2-D matrix; used for linear-layer weights and embedding banks.
struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
    const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
    double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
};

// Affine map y = W x + b.
struct LinearMap {
    Matrix weight;             // out_dim x in_dim
    std::vector<double> bias;  // out_dim

    int in_dim() const { return weight.cols; }
    int out_dim() const { return weight.rows; }
};

// Convolution parameters. Weights are (out_c, in_c, kh, kw); bias has one
// entry per output channel. Zero padding, cross-correlation convention.
struct ConvParams {
    Tensor4 weight;
    std::vector<double> bias;
    int stride = 1;
    int dilation = 1;
    int padding = 0;

    int out_channels() const { return weight.n; }
    int in_channels() const { return weight.c; }
    void validate() const;
};

// Gradient buffers shaped like a conv stack's parameters plus the scalar loss
// they came from. Buffer i matches layer i of whatever stack produced it.
struct GradTape {
    struct ConvGrads {
        Tensor4 weight;
        std::vector<double> bias;
    };
    std::vector<ConvGrads> layers;
    std::vector<double> classifier_row;  // trainable background row, if any
    double loss = 0.0;
};

// Throws DataError if any element is non-finite. Public tensor-core
// operations call this on their outputs.
void check_finite(const Tensor4& t, const char* what);
void check_finite(const std::vector<double>& v, const char* what);

}  // namespace dseg
