#pragma once

#include <cstdint>
#include <vector>

#include "dseg/tensor.hpp"
#include "dseg/textbank.hpp"

namespace dseg {

// Small conv stack with ReLU between layers (none after the last). The last
// layer may be dilated. Planted backbones are unpadded, so the output map is
// smaller than the image; segment() upsamples the logits back.
struct ToyBackbone {
    std::vector<ConvParams> layers;

    int in_channels() const { return layers.empty() ? 0 : layers.front().in_channels(); }
    int out_channels() const { return layers.empty() ? 0 : layers.back().out_channels(); }
};

Tensor4 backbone_forward(const Tensor4& image, const ToyBackbone& bb);

// Global attention-pooling head: one query from the spatial mean, keys and
// values per position, single head, then a final affine map.
struct AttnPoolHead {
    LinearMap emb_q;         // d_in -> d_emb
    LinearMap emb_k;         // d_in -> d_emb
    LinearMap emb_v;         // d_in -> d_emb
    LinearMap final_linear;  // d_emb -> d_out
    double scale = 1.0;      // softmax temperature divisor, > 0

    int d_in() const { return emb_v.in_dim(); }
    int d_emb() const { return emb_v.out_dim(); }
    int d_out() const { return final_linear.out_dim(); }
    void validate() const;
};

// The head after dropping emb_q/emb_k: value embedding and final map as two
// 1x1 convolutions, weights copied bit for bit.
struct DenseHead {
    ConvParams conv_v;  // 1x1, d_in -> d_emb
    ConvParams conv_f;  // 1x1, d_emb -> d_out
};

// Pooled embedding per batch item (n x d_out).
Matrix attn_pool_global(const Tensor4& features, const AttnPoolHead& head);

// Softmax weights over spatial positions, (n, 1, h, w); each item sums to 1.
Tensor4 attn_weights(const Tensor4& features, const AttnPoolHead& head);

DenseHead convert_to_dense(const AttnPoolHead& head);

// Per-pixel embeddings (n, d_out, h, w).
Tensor4 dense_features(const Tensor4& features, const DenseHead& dense);

// Cosine similarity of each pixel embedding to each bank row, divided by tau.
Tensor4 dense_logits(const Tensor4& embeddings, const ClassifierBank& bank,
                     double tau);

struct Segmentation {
    LabelMap labels;     // argmax class per pixel, ties to the lowest index
    Tensor4 confidence;  // (n, 1, h, w): softmax probability of the chosen class
};

// Full dense pass: backbone, per-pixel embeddings, cosine logits, bilinear
// upsample of the logits to out_h x out_w, then per-pixel argmax.
Segmentation segment(const Tensor4& image, const ToyBackbone& bb,
                     const DenseHead& dense, const ClassifierBank& bank, double tau,
                     int out_h, int out_w);

// Argmax plus chosen-class softmax probability over channel logits; shared by
// segment and the training pipeline.
Segmentation argmax_labels(const Tensor4& logits);

struct BackboneShape {
    std::vector<int> channels = {8, 16, 32};  // per-layer output channels
    int kernel = 3;                           // odd
    int dilation = 1;                         // applied to the last layer
    int d_emb = 32;
};

struct PlantedEncoder {
    ToyBackbone backbone;
    AttnPoolHead head;
};

// Builds a random backbone and solves the head's final map by least squares
// so that a flat patch of prototype color c maps, at the patch centre, to an
// embedding with cosine > 0.9 against embeddings row c. Retries with derived
// seeds a few times, then throws PlantingError.
// prototypes: K x in_channels colour rows; embeddings: K x d_out unit rows.
PlantedEncoder plant_encoder(const Matrix& prototypes, const Matrix& embeddings,
                             const BackboneShape& shape, std::uint64_t seed);

}  // namespace dseg
