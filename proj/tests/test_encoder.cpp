#include <doctest.h>

#include <cmath>
#include <vector>

#include "dseg/encoder.hpp"
#include "dseg/ops.hpp"
#include "dseg/rng.hpp"
#include "ref/reference.hpp"

using dseg::AttnPoolHead;
using dseg::ClassifierBank;
using dseg::DenseHead;
using dseg::LinearMap;
using dseg::Matrix;
using dseg::Tensor4;

namespace {

LinearMap random_linear(int out_dim, int in_dim, dseg::Rng& rng, bool with_bias) {
    LinearMap m;
    m.weight = Matrix(out_dim, in_dim);
    for (double& v : m.weight.a) v = rng.uniform(-1.0, 1.0);
    m.bias.assign(out_dim, 0.0);
    if (with_bias)
        for (double& b : m.bias) b = rng.uniform(-0.3, 0.3);
    return m;
}

AttnPoolHead random_head(int d_in, int d_emb, int d_out, dseg::Rng& rng) {
    AttnPoolHead h;
    h.emb_q = random_linear(d_emb, d_in, rng, true);
    h.emb_k = random_linear(d_emb, d_in, rng, true);
    h.emb_v = random_linear(d_emb, d_in, rng, true);
    h.final_linear = random_linear(d_out, d_emb, rng, true);
    h.scale = std::sqrt(static_cast<double>(d_emb));
    return h;
}

Tensor4 random_tensor(int n, int c, int h, int w, dseg::Rng& rng) {
    Tensor4 t(n, c, h, w);
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

std::vector<double> apply_map(const LinearMap& m, const std::vector<double>& x) {
    std::vector<double> y(m.out_dim());
    for (int r = 0; r < m.out_dim(); ++r) {
        y[r] = m.bias[r];
        for (int c = 0; c < m.in_dim(); ++c) y[r] += m.weight.at(r, c) * x[c];
    }
    return y;
}

std::vector<double> pixel(const Tensor4& t, int b, int y, int x) {
    std::vector<double> v(t.c);
    for (int c = 0; c < t.c; ++c) v[c] = t.at(b, c, y, x);
    return v;
}

ClassifierBank make_bank(const Matrix& rows) {
    ClassifierBank bank;
    bank.embeddings = rows;
    for (int r = 0; r < rows.rows; ++r) bank.names.push_back("c" + std::to_string(r));
    return bank;
}

}  // namespace

TEST_CASE("attn pooling of a single pixel ignores the query and key maps") {
    dseg::Rng rng(800);
    AttnPoolHead a = random_head(3, 4, 5, rng);
    AttnPoolHead b = a;
    b.emb_q = random_linear(4, 3, rng, true);
    b.emb_k = random_linear(4, 3, rng, true);

    const Tensor4 f = random_tensor(2, 3, 1, 1, rng);
    const Matrix pa = dseg::attn_pool_global(f, a);
    const Matrix pb = dseg::attn_pool_global(f, b);
    CHECK(pa.a == pb.a);

    for (int item = 0; item < 2; ++item) {
        const auto want = apply_map(a.final_linear, apply_map(a.emb_v, pixel(f, item, 0, 0)));
        for (int e = 0; e < 5; ++e)
            CHECK(std::abs(pa.at(item, e) - want[e]) < 1e-12);
    }
}

TEST_CASE("attn pooling of a constant map reduces to one value embedding") {
    dseg::Rng rng(801);
    const AttnPoolHead head = random_head(4, 6, 3, rng);
    Tensor4 f(1, 4, 5, 7);
    const std::vector<double> x = {0.3, -1.2, 0.9, 0.05};
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 35; ++i) f.data[f.index(0, c, 0, 0) + i] = x[c];
    const Matrix p = dseg::attn_pool_global(f, head);
    const auto want = apply_map(head.final_linear, apply_map(head.emb_v, x));
    for (int e = 0; e < 3; ++e) CHECK(std::abs(p.at(0, e) - want[e]) < 1e-12);
}

TEST_CASE("attn pooling matches the brute-force weighted sum") {
    dseg::Rng rng(802);
    const AttnPoolHead head = random_head(3, 5, 4, rng);
    const Tensor4 f = random_tensor(2, 3, 4, 4, rng);
    const Matrix got = dseg::attn_pool_global(f, head);

    for (int b = 0; b < 2; ++b) {
        std::vector<double> xbar(3, 0.0);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const auto px = pixel(f, b, y, x);
                for (int c = 0; c < 3; ++c) xbar[c] += px[c] / 16.0;
            }
        const auto qbar = apply_map(head.emb_q, xbar);
        Matrix keys(16, 5), values(16, 4);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const auto px = pixel(f, b, y, x);
                const auto k = apply_map(head.emb_k, px);
                const auto fv = apply_map(head.final_linear, apply_map(head.emb_v, px));
                for (int e = 0; e < 5; ++e) keys.at(y * 4 + x, e) = k[e];
                for (int e = 0; e < 4; ++e) values.at(y * 4 + x, e) = fv[e];
            }
        const auto want =
            dseg::ref::attention_pool_naive(qbar, keys, values, head.scale);
        for (int e = 0; e < 4; ++e) CHECK(std::abs(got.at(b, e) - want[e]) < 1e-10);
    }
}

TEST_CASE("attn pooling rejects mismatched feature channels") {
    dseg::Rng rng(803);
    const AttnPoolHead head = random_head(3, 4, 2, rng);
    const Tensor4 f = random_tensor(1, 5, 3, 3, rng);
    CHECK_THROWS_AS(dseg::attn_pool_global(f, head), dseg::ConfigError);
    CHECK_THROWS_AS(dseg::attn_weights(f, head), dseg::ConfigError);

    AttnPoolHead bad = head;
    bad.scale = 0.0;
    CHECK_THROWS_AS(dseg::attn_pool_global(random_tensor(1, 3, 2, 2, rng), bad),
                    dseg::ConfigError);
    bad = head;
    bad.emb_k = random_linear(5, 3, rng, true);  // d_emb mismatch against q/v
    CHECK_THROWS_AS(dseg::attn_pool_global(random_tensor(1, 3, 2, 2, rng), bad),
                    dseg::ConfigError);
}

TEST_CASE("attention weights are a proper spatial distribution") {
    dseg::Rng rng(804);
    const AttnPoolHead head = random_head(3, 4, 2, rng);

    // Constant map: identical keys, uniform weights.
    Tensor4 flat(1, 3, 3, 5);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 15; ++i) flat.data[flat.index(0, c, 0, 0) + i] = 0.7 - c;
    const Tensor4 uw = dseg::attn_weights(flat, head);
    for (double w : uw.data) CHECK(std::abs(w - 1.0 / 15.0) < 1e-12);

    // Single pixel: weight exactly one.
    const Tensor4 one = dseg::attn_weights(random_tensor(1, 3, 1, 1, rng), head);
    CHECK(one.data[0] == 1.0);

    // Random map: positive, sums to one, matches direct evaluation.
    const Tensor4 f = random_tensor(2, 3, 4, 3, rng);
    const Tensor4 w = dseg::attn_weights(f, head);
    for (int b = 0; b < 2; ++b) {
        double sum = 0.0;
        for (int i = 0; i < 12; ++i) {
            CHECK(w.data[w.index(b, 0, 0, 0) + i] > 0.0);
            sum += w.data[w.index(b, 0, 0, 0) + i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);

        std::vector<double> xbar(3, 0.0);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 3; ++x) {
                const auto px = pixel(f, b, y, x);
                for (int c = 0; c < 3; ++c) xbar[c] += px[c] / 12.0;
            }
        const auto qbar = apply_map(head.emb_q, xbar);
        std::vector<double> scores;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 3; ++x) {
                const auto k = apply_map(head.emb_k, pixel(f, b, y, x));
                double dot = 0.0;
                for (int e = 0; e < 4; ++e) dot += qbar[e] * k[e];
                scores.push_back(dot / head.scale);
            }
        const auto want = dseg::ref::softmax_longdouble(scores);
        for (int i = 0; i < 12; ++i)
            CHECK(std::abs(w.data[w.index(b, 0, 0, 0) + i] - want[i]) < 1e-10);
    }
}

TEST_CASE("convert_to_dense copies value and final maps bit for bit") {
    dseg::Rng rng(805);
    const AttnPoolHead head = random_head(3, 4, 6, rng);
    const DenseHead d1 = dseg::convert_to_dense(head);
    const DenseHead d2 = dseg::convert_to_dense(head);
    CHECK(d1.conv_v.weight.data == d2.conv_v.weight.data);
    CHECK(d1.conv_f.weight.data == d2.conv_f.weight.data);

    CHECK(d1.conv_v.weight.n == 4);
    CHECK(d1.conv_v.weight.c == 3);
    CHECK(d1.conv_v.weight.h == 1);
    CHECK(d1.conv_v.weight.w == 1);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(d1.conv_v.weight.at(r, c, 0, 0) == head.emb_v.weight.at(r, c));
    CHECK(d1.conv_v.bias == head.emb_v.bias);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 4; ++c)
            CHECK(d1.conv_f.weight.at(r, c, 0, 0) == head.final_linear.weight.at(r, c));
    CHECK(d1.conv_f.bias == head.final_linear.bias);

    // Scalar head: kernels are exactly the scalar weights.
    AttnPoolHead s;
    s.emb_q = LinearMap{Matrix(1, 1, 0.3), {0.0}};
    s.emb_k = LinearMap{Matrix(1, 1, -0.4), {0.0}};
    s.emb_v = LinearMap{Matrix(1, 1, 1.25), {0.5}};
    s.final_linear = LinearMap{Matrix(1, 1, -2.0), {0.25}};
    s.scale = 1.0;
    const DenseHead ds = dseg::convert_to_dense(s);
    CHECK(ds.conv_v.weight.data[0] == 1.25);
    CHECK(ds.conv_v.bias[0] == 0.5);
    CHECK(ds.conv_f.weight.data[0] == -2.0);
    CHECK(ds.conv_f.bias[0] == 0.25);
}

TEST_CASE("dense_features equals the per-pixel affine maps") {
    dseg::Rng rng(806);
    const AttnPoolHead head = random_head(4, 3, 5, rng);
    const DenseHead dense = dseg::convert_to_dense(head);

    // Constant in, constant out.
    Tensor4 flat(1, 4, 4, 6);
    const std::vector<double> x = {1.0, -0.5, 0.25, 2.0};
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 24; ++i) flat.data[flat.index(0, c, 0, 0) + i] = x[c];
    const Tensor4 df = dseg::dense_features(flat, dense);
    const auto want = apply_map(head.final_linear, apply_map(head.emb_v, x));
    for (int e = 0; e < 5; ++e)
        for (int i = 0; i < 24; ++i)
            CHECK(std::abs(df.data[df.index(0, e, 0, 0) + i] - want[e]) < 1e-12);

    // Random map against the plain matrix products.
    const Tensor4 f = random_tensor(2, 4, 3, 4, rng);
    const Tensor4 got = dseg::dense_features(f, dense);
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < 3; ++y)
            for (int xx = 0; xx < 4; ++xx) {
                const auto w = apply_map(head.final_linear,
                                     apply_map(head.emb_v, pixel(f, b, y, xx)));
                for (int e = 0; e < 5; ++e)
                    CHECK(std::abs(got.at(b, e, y, xx) - w[e]) < 1e-12);
            }

    CHECK_THROWS_AS(dseg::dense_features(random_tensor(1, 3, 2, 2, rng), dense),
                    dseg::ConfigError);
}

TEST_CASE("pooling equals the weighted sum of dense features") {
    // The conversion identity, checked over many random heads and maps.
    dseg::Rng rng(807);
    for (int trial = 0; trial < 200; ++trial) {
        const int d_in = rng.range(2, 6);
        const int d_emb = rng.range(1, 5);
        const int d_out = rng.range(1, 6);
        const int h = rng.range(1, 5), w = rng.range(1, 5);
        const int n = rng.range(1, 2);
        const AttnPoolHead head = random_head(d_in, d_emb, d_out, rng);
        const Tensor4 f = random_tensor(n, d_in, h, w, rng);

        const Matrix pooled = dseg::attn_pool_global(f, head);
        const Tensor4 weights = dseg::attn_weights(f, head);
        const Tensor4 dfm = dseg::dense_features(f, dseg::convert_to_dense(head));

        for (int b = 0; b < n; ++b)
            for (int e = 0; e < d_out; ++e) {
                double acc = 0.0;
                for (int i = 0; i < h * w; ++i)
                    acc += weights.data[weights.index(b, 0, 0, 0) + i] *
                           dfm.data[dfm.index(b, e, 0, 0) + i];
                CHECK(std::abs(acc - pooled.at(b, e)) < 1e-10);
            }
    }
}

TEST_CASE("dense_logits computes temperature-scaled cosines") {
    Matrix rows(2, 4);
    rows.at(0, 0) = 1.0;  // e0 = x-axis
    rows.at(1, 1) = 1.0;  // e1 = y-axis
    const ClassifierBank bank = make_bank(rows);

    Tensor4 emb(1, 4, 1, 2);
    // Pixel 0: equal to e0 scaled by 3. Pixel 1: orthogonal to e0, along e1.
    emb.at(0, 0, 0, 0) = 3.0;
    emb.at(0, 1, 0, 1) = 0.5;
    const Tensor4 logits = dseg::dense_logits(emb, bank, 0.01);
    CHECK(std::abs(logits.at(0, 0, 0, 0) - 100.0) < 1e-9);
    CHECK(std::abs(logits.at(0, 1, 0, 0) - 0.0) < 1e-9);
    CHECK(std::abs(logits.at(0, 0, 0, 1) - 0.0) < 1e-9);
    CHECK(std::abs(logits.at(0, 1, 0, 1) - 100.0) < 1e-9);
    CHECK(logits.at(0, 0, 0, 0) > logits.at(0, 1, 0, 0));

    CHECK_THROWS_AS(dseg::dense_logits(emb, bank, 0.0), dseg::ConfigError);
    Tensor4 zero(1, 4, 1, 1);
    CHECK_THROWS_AS(dseg::dense_logits(zero, bank, 0.01),
                    dseg::DegenerateVectorError);
}

TEST_CASE("dense_logits matches the explicit loop and is scale invariant") {
    dseg::Rng rng(808);
    Matrix rows(3, 6);
    for (int r = 0; r < 3; ++r) {
        std::vector<double> v(6);
        for (double& x : v) x = rng.normal();
        const auto u = dseg::l2_normalize(v);
        std::copy(u.begin(), u.end(), rows.row(r));
    }
    const ClassifierBank bank = make_bank(rows);
    Tensor4 emb = random_tensor(2, 6, 3, 3, rng);
    for (double& v : emb.data) v += 0.05;  // keep every pixel well away from zero

    const Tensor4 got = dseg::dense_logits(emb, bank, 0.02);
    const Tensor4 want = dseg::ref::cosine_logits_naive(emb, rows, 0.02);
    for (std::size_t i = 0; i < got.data.size(); ++i)
        CHECK(std::abs(got.data[i] - want.data[i]) < 1e-10);

    // Rescaling features or bank rows by any positive factor changes nothing.
    Tensor4 scaled = emb;
    for (double& v : scaled.data) v *= 37.5;
    const Tensor4 gs = dseg::dense_logits(scaled, bank, 0.02);
    ClassifierBank big = bank;
    for (double& v : big.embeddings.a) v *= 0.004;
    const Tensor4 gb = dseg::dense_logits(emb, big, 0.02);
    for (std::size_t i = 0; i < got.data.size(); ++i) {
        CHECK(std::abs(got.data[i] - gs.data[i]) < 1e-9);
        CHECK(std::abs(got.data[i] - gb.data[i]) < 1e-9);
    }
}

TEST_CASE("argmax breaks ties toward the lowest class index") {
    Tensor4 logits(1, 3, 1, 2);
    logits.at(0, 0, 0, 0) = 2.0;
    logits.at(0, 1, 0, 0) = 2.0;  // tie with class 0
    logits.at(0, 2, 0, 0) = 1.0;
    logits.at(0, 0, 0, 1) = -1.0;
    logits.at(0, 1, 0, 1) = 0.0;
    logits.at(0, 2, 0, 1) = 0.0;  // tie with class 1
    const dseg::Segmentation seg = dseg::argmax_labels(logits);
    CHECK(seg.labels.ids[0] == 0);
    CHECK(seg.labels.ids[1] == 1);
}

TEST_CASE("segment on a planted encoder recovers class regions") {
    dseg::Rng rng(809);
    Matrix protos(2, 3);
    protos.at(0, 0) = 1.0;  // pure red
    protos.at(1, 1) = 1.0;  // pure green
    Matrix embs(2, 16);
    embs.at(0, 0) = 1.0;
    embs.at(1, 1) = 1.0;

    dseg::BackboneShape shape;
    shape.channels = {8, 16};
    shape.d_emb = 16;
    const dseg::PlantedEncoder enc = dseg::plant_encoder(protos, embs, shape, 2024);
    const DenseHead dense = dseg::convert_to_dense(enc.head);
    const ClassifierBank bank = make_bank(embs);

    Tensor4 img(1, 3, 16, 16);
    for (int i = 0; i < 256; ++i) img.data[img.index(0, 0, 0, 0) + i] = 1.0;
    const dseg::Segmentation seg =
        dseg::segment(img, enc.backbone, dense, bank, 0.01, 16, 16);
    for (std::uint8_t id : seg.labels.ids) CHECK(id == 0);

    // Swapping the two bank rows swaps the labels.
    ClassifierBank swapped = bank;
    for (int d = 0; d < 16; ++d) {
        std::swap(swapped.embeddings.at(0, d), swapped.embeddings.at(1, d));
    }
    const dseg::Segmentation sw =
        dseg::segment(img, enc.backbone, dense, swapped, 0.01, 16, 16);
    for (std::uint8_t id : sw.labels.ids) CHECK(id == 1);

    // The argmax is invariant to the temperature.
    const dseg::Segmentation half =
        dseg::segment(img, enc.backbone, dense, bank, 0.005, 16, 16);
    CHECK(half.labels.ids == seg.labels.ids);
}

TEST_CASE("segment with a single class is all zeros at full confidence") {
    dseg::Rng rng(810);
    Matrix rows(1, 4);
    rows.at(0, 2) = 1.0;
    const ClassifierBank bank = make_bank(rows);
    const Tensor4 emb = random_tensor(1, 4, 3, 3, rng);
    const dseg::Segmentation seg =
        dseg::argmax_labels(dseg::dense_logits(emb, bank, 0.01));
    for (std::uint8_t id : seg.labels.ids) CHECK(id == 0);
    for (double c : seg.confidence.data) CHECK(c == 1.0);
}

TEST_CASE("plant_encoder maps orthogonal prototypes to their embeddings exactly") {
    Matrix protos(2, 3);
    protos.at(0, 0) = 1.0;
    protos.at(1, 1) = 1.0;
    Matrix embs(2, 8);
    embs.at(0, 3) = 1.0;
    embs.at(1, 5) = 1.0;
    dseg::BackboneShape shape;
    shape.channels = {6, 12};
    shape.d_emb = 12;
    const dseg::PlantedEncoder enc = dseg::plant_encoder(protos, embs, shape, 7);
    const DenseHead dense = dseg::convert_to_dense(enc.head);

    for (int c = 0; c < 2; ++c) {
        Tensor4 img(1, 3, 12, 12);
        for (int ch = 0; ch < 3; ++ch)
            for (int i = 0; i < 144; ++i)
                img.data[img.index(0, ch, 0, 0) + i] = protos.at(c, ch);
        const Tensor4 feats = backbone_forward(img, enc.backbone);
        const Tensor4 dfm = dseg::dense_features(feats, dense);
        double dot = 0.0, sq = 0.0;
        for (int e = 0; e < 8; ++e) {
            const double v = dfm.at(0, e, dfm.h / 2, dfm.w / 2);
            dot += v * embs.at(c, e);
            sq += v * v;
        }
        CHECK(dot / std::sqrt(sq) > 1.0 - 1e-6);
    }
}

TEST_CASE("plant_encoder handles six classes in a 32-dim feature space") {
    dseg::Rng rng(811);
    Matrix protos(6, 3);
    for (auto& v : protos.a) v = rng.uniform(0.05, 0.95);
    Matrix embs(6, 24);
    for (int r = 0; r < 6; ++r) {
        std::vector<double> v(24);
        for (double& x : v) x = rng.normal();
        const auto u = dseg::l2_normalize(v);
        std::copy(u.begin(), u.end(), embs.row(r));
    }
    const dseg::BackboneShape shape;  // 8 -> 16 -> 32, d_emb 32
    const dseg::PlantedEncoder enc = dseg::plant_encoder(protos, embs, shape, 99);
    const DenseHead dense = dseg::convert_to_dense(enc.head);

    for (int c = 0; c < 6; ++c) {
        Tensor4 img(1, 3, 16, 16);
        for (int ch = 0; ch < 3; ++ch)
            for (int i = 0; i < 256; ++i)
                img.data[img.index(0, ch, 0, 0) + i] = protos.at(c, ch);
        const Tensor4 dfm =
            dseg::dense_features(backbone_forward(img, enc.backbone), dense);
        double dot = 0.0, sq = 0.0;
        for (int e = 0; e < 24; ++e) {
            const double v = dfm.at(0, e, dfm.h / 2, dfm.w / 2);
            dot += v * embs.at(c, e);
            sq += v * v;
        }
        CHECK(dot / std::sqrt(sq) > 0.9);
    }
}

TEST_CASE("plant_encoder is deterministic and validates its arguments") {
    Matrix protos(2, 3);
    protos.at(0, 0) = 0.8;
    protos.at(1, 2) = 0.6;
    Matrix embs(2, 8);
    embs.at(0, 0) = 1.0;
    embs.at(1, 1) = 1.0;
    dseg::BackboneShape shape;
    shape.channels = {4, 8};
    shape.d_emb = 8;

    const dseg::PlantedEncoder a = dseg::plant_encoder(protos, embs, shape, 5);
    const dseg::PlantedEncoder b = dseg::plant_encoder(protos, embs, shape, 5);
    REQUIRE(a.backbone.layers.size() == b.backbone.layers.size());
    for (std::size_t i = 0; i < a.backbone.layers.size(); ++i)
        CHECK(a.backbone.layers[i].weight.data == b.backbone.layers[i].weight.data);
    CHECK(a.head.final_linear.weight.a == b.head.final_linear.weight.a);

    Tensor4 img(1, 3, 10, 10);
    for (int i = 0; i < 100; ++i) img.data[i] = 0.8;
    const Tensor4 f1 = backbone_forward(img, a.backbone);
    const Tensor4 f2 = backbone_forward(img, a.backbone);
    CHECK(f1.data == f2.data);

    Matrix one(1, 3);
    CHECK_THROWS_AS(dseg::plant_encoder(one, embs, shape, 5), dseg::ArgumentError);
    dseg::BackboneShape tiny = shape;
    tiny.d_emb = 1;  // fewer value dims than classes
    CHECK_THROWS_AS(dseg::plant_encoder(protos, embs, tiny, 5), dseg::ArgumentError);
    Matrix wrong(3, 8);
    CHECK_THROWS_AS(dseg::plant_encoder(protos, wrong, shape, 5), dseg::ArgumentError);
}
