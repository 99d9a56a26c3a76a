#include "dseg/encoder.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "dseg/ops.hpp"
#include "dseg/rng.hpp"

namespace dseg {

namespace {

void check_linear(const LinearMap& m, const char* what) {
    if (m.weight.rows < 1 || m.weight.cols < 1 ||
        m.bias.size() != static_cast<std::size_t>(m.weight.rows)) {
        throw ConfigError(std::string(what) + ": inconsistent linear map dims");
    }
}

void apply_linear(const LinearMap& m, const double* x, double* y) {
    for (int r = 0; r < m.out_dim(); ++r) {
        double acc = m.bias[r];
        const double* w = m.weight.row(r);
        for (int c = 0; c < m.in_dim(); ++c) acc += w[c] * x[c];
        y[r] = acc;
    }
}

// Softmax weights over spatial positions for one batch item.
std::vector<double> item_attn_weights(const Tensor4& f, int b, const AttnPoolHead& head) {
    const int d_in = head.d_in(), d_emb = head.d_emb();
    const int hw = f.h * f.w;

    std::vector<double> xbar(d_in, 0.0);
    for (int c = 0; c < d_in; ++c) {
        double acc = 0.0;
        const double* plane = f.data.data() + f.index(b, c, 0, 0);
        for (int i = 0; i < hw; ++i) acc += plane[i];
        xbar[c] = acc / hw;
    }
    std::vector<double> qbar(d_emb);
    apply_linear(head.emb_q, xbar.data(), qbar.data());

    std::vector<double> x(d_in), k(d_emb), scores(hw);
    for (int i = 0; i < hw; ++i) {
        for (int c = 0; c < d_in; ++c) x[c] = f.data[f.index(b, c, 0, 0) + i];
        apply_linear(head.emb_k, x.data(), k.data());
        double dot = 0.0;
        for (int e = 0; e < d_emb; ++e) dot += qbar[e] * k[e];
        scores[i] = dot / head.scale;
    }
    return softmax(scores);
}

void check_features(const Tensor4& f, int want_c, const char* what) {
    if (f.c != want_c) {
        throw ConfigError(std::string(what) + ": feature channels " +
                          std::to_string(f.c) + " != expected " +
                          std::to_string(want_c));
    }
    if (f.h < 1 || f.w < 1 || f.n < 1) {
        throw ConfigError(std::string(what) + ": empty feature map");
    }
}

}  // namespace

void AttnPoolHead::validate() const {
    check_linear(emb_q, "emb_q");
    check_linear(emb_k, "emb_k");
    check_linear(emb_v, "emb_v");
    check_linear(final_linear, "final_linear");
    if (emb_k.in_dim() != emb_q.in_dim() || emb_v.in_dim() != emb_q.in_dim() ||
        emb_k.out_dim() != emb_q.out_dim() || emb_v.out_dim() != emb_q.out_dim()) {
        throw ConfigError("attention head: q/k/v maps disagree on dims");
    }
    if (final_linear.in_dim() != emb_v.out_dim()) {
        throw ConfigError("attention head: final map input != value dim");
    }
    if (!(scale > 0.0)) {
        throw ConfigError("attention head: scale must be positive");
    }
}

Tensor4 backbone_forward(const Tensor4& image, const ToyBackbone& bb) {
    if (bb.layers.empty()) {
        throw ConfigError("backbone has no layers");
    }
    Tensor4 x = conv2d(image, bb.layers[0]);
    for (std::size_t i = 1; i < bb.layers.size(); ++i) {
        x = conv2d(relu(x), bb.layers[i]);
    }
    return x;
}

Matrix attn_pool_global(const Tensor4& features, const AttnPoolHead& head) {
    head.validate();
    check_features(features, head.d_in(), "attn_pool_global");
    const int d_in = head.d_in(), d_emb = head.d_emb(), d_out = head.d_out();
    const int hw = features.h * features.w;
    Matrix out(features.n, d_out);
#pragma omp parallel for schedule(static)
    for (int b = 0; b < features.n; ++b) {
        const std::vector<double> w = item_attn_weights(features, b, head);
        std::vector<double> x(d_in), v(d_emb), fv(d_out);
        std::vector<double> acc(d_out, 0.0);
        for (int i = 0; i < hw; ++i) {
            for (int c = 0; c < d_in; ++c)
                x[c] = features.data[features.index(b, c, 0, 0) + i];
            apply_linear(head.emb_v, x.data(), v.data());
            apply_linear(head.final_linear, v.data(), fv.data());
            for (int e = 0; e < d_out; ++e) acc[e] += w[i] * fv[e];
        }
        for (int e = 0; e < d_out; ++e) out.at(b, e) = acc[e];
    }
    check_finite(out.a, "attn_pool_global");
    return out;
}

Tensor4 attn_weights(const Tensor4& features, const AttnPoolHead& head) {
    head.validate();
    check_features(features, head.d_in(), "attn_weights");
    Tensor4 out(features.n, 1, features.h, features.w);
#pragma omp parallel for schedule(static)
    for (int b = 0; b < features.n; ++b) {
        const std::vector<double> w = item_attn_weights(features, b, head);
        std::copy(w.begin(), w.end(), out.data.begin() + out.index(b, 0, 0, 0));
    }
    return out;
}

DenseHead convert_to_dense(const AttnPoolHead& head) {
    head.validate();
    DenseHead d;
    d.conv_v.weight = Tensor4(head.d_emb(), head.d_in(), 1, 1);
    std::copy(head.emb_v.weight.a.begin(), head.emb_v.weight.a.end(),
              d.conv_v.weight.data.begin());
    d.conv_v.bias = head.emb_v.bias;
    d.conv_f.weight = Tensor4(head.d_out(), head.d_emb(), 1, 1);
    std::copy(head.final_linear.weight.a.begin(), head.final_linear.weight.a.end(),
              d.conv_f.weight.data.begin());
    d.conv_f.bias = head.final_linear.bias;
    return d;
}

Tensor4 dense_features(const Tensor4& features, const DenseHead& dense) {
    return conv2d(conv2d(features, dense.conv_v), dense.conv_f);
}

Tensor4 dense_logits(const Tensor4& embeddings, const ClassifierBank& bank,
                     double tau) {
    if (!(tau > 0.0)) {
        throw ConfigError("dense_logits: tau must be positive");
    }
    if (embeddings.c != bank.dim()) {
        throw ConfigError("dense_logits: embedding dim " + std::to_string(embeddings.c) +
                          " != bank dim " + std::to_string(bank.dim()));
    }
    const int rows = bank.rows(), d = bank.dim();
    // Bank rows are normalized here so a drifted trainable row still yields
    // cosine logits.
    Matrix unit(rows, d);
    for (int r = 0; r < rows; ++r) {
        const std::vector<double> u =
            l2_normalize(std::vector<double>(bank.embeddings.row(r),
                                             bank.embeddings.row(r) + d));
        std::copy(u.begin(), u.end(), unit.row(r));
    }

    Tensor4 out(embeddings.n, rows, embeddings.h, embeddings.w);
    const int hw = embeddings.h * embeddings.w;
    const int total = embeddings.n * hw;
    std::atomic<bool> degenerate{false};
#pragma omp parallel for schedule(static)
    for (int p = 0; p < total; ++p) {
        const int b = p / hw;
        const int i = p % hw;
        double sq = 0.0;
        for (int c = 0; c < d; ++c) {
            const double v = embeddings.data[embeddings.index(b, c, 0, 0) + i];
            sq += v * v;
        }
        if (!(sq > 1e-24)) {
            degenerate.store(true, std::memory_order_relaxed);
            continue;
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (int r = 0; r < rows; ++r) {
            const double* u = unit.row(r);
            double dot = 0.0;
            for (int c = 0; c < d; ++c)
                dot += embeddings.data[embeddings.index(b, c, 0, 0) + i] * u[c];
            out.data[out.index(b, r, 0, 0) + i] = dot * inv / tau;
        }
    }
    if (degenerate.load()) {
        throw DegenerateVectorError("dense_logits: zero-norm pixel embedding");
    }
    check_finite(out, "dense_logits");
    return out;
}

Segmentation argmax_labels(const Tensor4& logits) {
    if (logits.c < 1) {
        throw ConfigError("argmax_labels: no channels");
    }
    if (logits.c > kIgnoreIndex) {
        throw ConfigError("argmax_labels: more than 255 classes collides with the "
                          "ignore value");
    }
    Segmentation seg;
    seg.labels = LabelMap(logits.n, logits.h, logits.w);
    seg.confidence = Tensor4(logits.n, 1, logits.h, logits.w);
    const int hw = logits.h * logits.w;
    const int total = logits.n * hw;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < total; ++p) {
        const int b = p / hw;
        const int i = p % hw;
        int best = 0;
        double best_v = logits.data[logits.index(b, 0, 0, 0) + i];
        for (int c = 1; c < logits.c; ++c) {
            const double v = logits.data[logits.index(b, c, 0, 0) + i];
            if (v > best_v) {  // strict: ties keep the lowest class index
                best_v = v;
                best = c;
            }
        }
        // Softmax probability of the winning class.
        double sum = 0.0;
        for (int c = 0; c < logits.c; ++c)
            sum += std::exp(logits.data[logits.index(b, c, 0, 0) + i] - best_v);
        seg.labels.ids[p] = static_cast<std::uint8_t>(best);
        seg.confidence.data[p] = 1.0 / sum;
    }
    return seg;
}

Segmentation segment(const Tensor4& image, const ToyBackbone& bb,
                     const DenseHead& dense, const ClassifierBank& bank, double tau,
                     int out_h, int out_w) {
    const Tensor4 feats = backbone_forward(image, bb);
    const Tensor4 dfm = dense_features(feats, dense);
    const Tensor4 logits = dense_logits(dfm, bank, tau);
    return argmax_labels(bilinear_resize(logits, out_h, out_w));
}

namespace {

// Solves A X = B in place by Gaussian elimination with partial pivoting.
// Returns false when a pivot is numerically zero.
bool solve_linear_system(Matrix& a, Matrix& b) {
    const int k = a.rows;
    for (int col = 0; col < k; ++col) {
        int piv = col;
        for (int r = col + 1; r < k; ++r)
            if (std::abs(a.at(r, col)) > std::abs(a.at(piv, col))) piv = r;
        if (std::abs(a.at(piv, col)) < 1e-12) return false;
        if (piv != col) {
            for (int c = 0; c < k; ++c) std::swap(a.at(piv, c), a.at(col, c));
            for (int c = 0; c < b.cols; ++c) std::swap(b.at(piv, c), b.at(col, c));
        }
        const double inv = 1.0 / a.at(col, col);
        for (int r = col + 1; r < k; ++r) {
            const double f = a.at(r, col) * inv;
            if (f == 0.0) continue;
            for (int c = col; c < k; ++c) a.at(r, c) -= f * a.at(col, c);
            for (int c = 0; c < b.cols; ++c) b.at(r, c) -= f * b.at(col, c);
        }
    }
    for (int col = k - 1; col >= 0; --col) {
        const double inv = 1.0 / a.at(col, col);
        for (int c = 0; c < b.cols; ++c) {
            double acc = b.at(col, c);
            for (int r = col + 1; r < k; ++r) acc -= a.at(col, r) * b.at(r, c);
            b.at(col, c) = acc * inv;
        }
    }
    return true;
}

LinearMap random_linear(int out_dim, int in_dim, double stddev, Rng& rng) {
    LinearMap m;
    m.weight = Matrix(out_dim, in_dim);
    for (double& v : m.weight.a) v = rng.normal() * stddev;
    m.bias.assign(out_dim, 0.0);
    return m;
}

}  // namespace

PlantedEncoder plant_encoder(const Matrix& prototypes, const Matrix& embeddings,
                             const BackboneShape& shape, std::uint64_t seed) {
    const int k = prototypes.rows;
    if (k < 2) {
        throw ArgumentError("plant_encoder: need at least 2 classes");
    }
    if (embeddings.rows != k) {
        throw ArgumentError("plant_encoder: prototype/embedding row mismatch");
    }
    if (k > shape.d_emb) {
        throw ArgumentError("plant_encoder: more classes than value-embedding dims");
    }
    if (shape.channels.empty() || shape.kernel < 1 || shape.kernel % 2 == 0 ||
        shape.dilation < 1 || shape.d_emb < 1) {
        throw ConfigError("plant_encoder: bad backbone shape");
    }
    const int in_c = prototypes.cols;
    const int d_in = shape.channels.back();
    const int d_out = embeddings.cols;

    constexpr int kAttempts = 8;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        Rng rng(hash_combine(hash_combine(seed, "plant"), static_cast<std::uint64_t>(attempt)));

        PlantedEncoder enc;
        int prev_c = in_c;
        for (std::size_t li = 0; li < shape.channels.size(); ++li) {
            ConvParams p;
            const int out_c = shape.channels[li];
            p.weight = Tensor4(out_c, prev_c, shape.kernel, shape.kernel);
            const double he = std::sqrt(2.0 / (prev_c * shape.kernel * shape.kernel));
            for (double& v : p.weight.data) v = rng.normal() * he;
            p.bias.assign(out_c, 0.1);
            p.dilation = (li + 1 == shape.channels.size()) ? shape.dilation : 1;
            // Unpadded: on a flat image every output pixel sees only real
            // input, so the feature map is spatially uniform and the planted
            // correspondence holds everywhere, not just at the centre.
            p.padding = 0;
            enc.backbone.layers.push_back(std::move(p));
            prev_c = out_c;
        }

        enc.head.emb_q = random_linear(shape.d_emb, d_in, 1.0 / std::sqrt(d_in), rng);
        enc.head.emb_k = random_linear(shape.d_emb, d_in, 1.0 / std::sqrt(d_in), rng);
        enc.head.emb_v = random_linear(shape.d_emb, d_in, 1.0 / std::sqrt(d_in), rng);
        enc.head.scale = std::sqrt(static_cast<double>(shape.d_emb));

        // Flat prototype patches, comfortably larger than the receptive field.
        int rf = 1;
        for (const auto& l : enc.backbone.layers) rf += l.dilation * (shape.kernel - 1);
        const int patch = std::max(8, rf + 4);

        std::vector<Tensor4> patch_feats;
        Matrix z(k, shape.d_emb);  // value embeddings of the class features
        for (int c = 0; c < k; ++c) {
            Tensor4 img(1, in_c, patch, patch);
            for (int ch = 0; ch < in_c; ++ch) {
                const double v = prototypes.at(c, ch);
                double* plane = img.data.data() + img.index(0, ch, 0, 0);
                for (int i = 0; i < patch * patch; ++i) plane[i] = v;
            }
            Tensor4 feats = backbone_forward(img, enc.backbone);
            const int cy = feats.h / 2, cx = feats.w / 2;
            std::vector<double> u(d_in);
            for (int ch = 0; ch < d_in; ++ch) u[ch] = feats.at(0, ch, cy, cx);
            apply_linear(enc.head.emb_v, u.data(), z.row(c));
            patch_feats.push_back(std::move(feats));
        }

        // Minimum-norm W with W z_c = e_c: W = (G^-1 E)^T Z, G = Z Z^T.
        Matrix gram(k, k);
        for (int r = 0; r < k; ++r)
            for (int c = 0; c < k; ++c) {
                double acc = 0.0;
                for (int e = 0; e < shape.d_emb; ++e) acc += z.at(r, e) * z.at(c, e);
                gram.at(r, c) = acc;
            }
        Matrix x = embeddings;  // becomes G^-1 E
        if (!solve_linear_system(gram, x)) continue;

        enc.head.final_linear.weight = Matrix(d_out, shape.d_emb);
        for (int r = 0; r < d_out; ++r)
            for (int e = 0; e < shape.d_emb; ++e) {
                double acc = 0.0;
                for (int c = 0; c < k; ++c) acc += x.at(c, r) * z.at(c, e);
                enc.head.final_linear.weight.at(r, e) = acc;
            }
        enc.head.final_linear.bias.assign(d_out, 0.0);

        // Verify through the real dense path before returning.
        const DenseHead dense = convert_to_dense(enc.head);
        bool ok = true;
        for (int c = 0; c < k && ok; ++c) {
            const Tensor4 dfm = dense_features(patch_feats[c], dense);
            const int cy = dfm.h / 2, cx = dfm.w / 2;
            double dot = 0.0, sq = 0.0, esq = 0.0;
            for (int e = 0; e < d_out; ++e) {
                const double v = dfm.at(0, e, cy, cx);
                dot += v * embeddings.at(c, e);
                sq += v * v;
                esq += embeddings.at(c, e) * embeddings.at(c, e);
            }
            if (!(sq > 0.0) || dot / std::sqrt(sq * esq) <= 0.9) ok = false;
        }
        if (ok) return enc;
    }
    throw PlantingError("plant_encoder: verification failed after " +
                        std::to_string(kAttempts) + " attempts");
}

}  // namespace dseg
