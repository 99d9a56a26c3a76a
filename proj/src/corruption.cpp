#include "dseg/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dseg/error.hpp"
#include "dseg/metrics.hpp"
#include "dseg/rng.hpp"

namespace dseg {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Mirror index into [0, n) with the edge sample included once per bounce:
// -1 -> 0, -2 -> 1, n -> n-1.
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// One private stream per image element; draw order inside a pixel is fixed,
// so parallel schedules cannot change the result.
Rng element_rng(std::uint64_t seed, std::size_t element) {
    return Rng(hash_combine(seed, static_cast<std::uint64_t>(element)));
}

void check_image(const Tensor4& image) {
    if (image.size() == 0) throw ArgumentError("corruption: empty image");
    for (double v : image.data) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
            throw ArgumentError("corruption: image values must lie in [0,1]");
    }
}

int poisson_draw(double lambda, Rng& rng) {
    if (lambda <= 0.0) return 0;
    const double limit = std::exp(-lambda);
    double p = 1.0;
    int k = 0;
    do {
        ++k;
        p *= rng.uniform_pos();
    } while (p > limit);
    return k - 1;
}

Tensor4 gaussian_noise(const Tensor4& x, double sigma, std::uint64_t seed) {
    Tensor4 out = x;
    const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = element_rng(seed, static_cast<std::size_t>(i));
        out.data[i] = clamp01(x.data[i] + sigma * rng.normal());
    }
    return out;
}

Tensor4 shot_noise(const Tensor4& x, double lambda, std::uint64_t seed) {
    Tensor4 out = x;
    const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = element_rng(seed, static_cast<std::size_t>(i));
        out.data[i] = clamp01(poisson_draw(x.data[i] * lambda, rng) / lambda);
    }
    return out;
}

Tensor4 impulse_noise(const Tensor4& x, double amount, std::uint64_t seed) {
    Tensor4 out = x;
    const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = element_rng(seed, static_cast<std::size_t>(i));
        const double u = rng.uniform();
        if (u < amount * 0.5)
            out.data[i] = 0.0;
        else if (u < amount)
            out.data[i] = 1.0;
    }
    return out;
}

Tensor4 speckle_noise(const Tensor4& x, double sigma, std::uint64_t seed) {
    Tensor4 out = x;
    const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = element_rng(seed, static_cast<std::size_t>(i));
        out.data[i] = clamp01(x.data[i] * (1.0 + sigma * rng.normal()));
    }
    return out;
}

// Separable Gaussian blur with mirrored borders; the kernel is normalized, so
// constant regions pass through unchanged.
Tensor4 gaussian_blur(const Tensor4& x, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int j = -radius; j <= radius; ++j) {
        kernel[j + radius] = std::exp(-(j * j) / (2.0 * sigma * sigma));
        sum += kernel[j + radius];
    }
    for (double& w : kernel) w /= sum;

    Tensor4 tmp = x;
    const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const int in = static_cast<int>(p / x.c);
        const int ch = static_cast<int>(p % x.c);
        for (int y = 0; y < x.h; ++y) {
            for (int xx = 0; xx < x.w; ++xx) {
                double acc = 0.0;
                for (int j = -radius; j <= radius; ++j)
                    acc += kernel[j + radius] * x.at(in, ch, y, reflect_index(xx + j, x.w));
                tmp.at(in, ch, y, xx) = acc;
            }
        }
    }
    Tensor4 out = x;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const int in = static_cast<int>(p / x.c);
        const int ch = static_cast<int>(p % x.c);
        for (int y = 0; y < x.h; ++y) {
            for (int xx = 0; xx < x.w; ++xx) {
                double acc = 0.0;
                for (int j = -radius; j <= radius; ++j)
                    acc += kernel[j + radius] * tmp.at(in, ch, reflect_index(y + j, x.h), xx);
                out.at(in, ch, y, xx) = clamp01(acc);
            }
        }
    }
    return out;
}

// Normalized disk kernel, mirrored borders.
Tensor4 defocus_blur(const Tensor4& x, int radius) {
    std::vector<std::pair<int, int>> taps;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= radius * radius) taps.emplace_back(dy, dx);
    const double w = 1.0 / static_cast<double>(taps.size());

    Tensor4 out = x;
    const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const int in = static_cast<int>(p / x.c);
        const int ch = static_cast<int>(p % x.c);
        for (int y = 0; y < x.h; ++y) {
            for (int xx = 0; xx < x.w; ++xx) {
                double acc = 0.0;
                for (const auto& [dy, dx] : taps)
                    acc += x.at(in, ch, reflect_index(y + dy, x.h), reflect_index(xx + dx, x.w));
                out.at(in, ch, y, xx) = clamp01(acc * w);
            }
        }
    }
    return out;
}

// Soft elliptical blobs alpha-blended over the image, drawn in a fixed order
// from one seeded stream per item.
Tensor4 spatter(const Tensor4& x, int blobs, double opacity, int level, std::uint64_t seed) {
    static constexpr double kColor[3] = {0.33, 0.27, 0.22};
    Tensor4 out = x;
    for (int in = 0; in < x.n; ++in) {
        Rng rng(hash_combine(hash_combine(seed, std::uint64_t(0x5350u)), static_cast<std::uint64_t>(in)));
        for (int b = 0; b < blobs; ++b) {
            const double cy = rng.uniform(0.0, static_cast<double>(x.h));
            const double cx = rng.uniform(0.0, static_cast<double>(x.w));
            const double radius = rng.uniform(2.0, 2.0 + static_cast<double>(level));
            const int span = static_cast<int>(std::ceil(3.0 * radius));
            const int y0 = std::max(0, static_cast<int>(cy) - span);
            const int y1 = std::min(x.h - 1, static_cast<int>(cy) + span);
            const int x0 = std::max(0, static_cast<int>(cx) - span);
            const int x1 = std::min(x.w - 1, static_cast<int>(cx) + span);
            for (int y = y0; y <= y1; ++y) {
                for (int xx = x0; xx <= x1; ++xx) {
                    const double d2 = (y - cy) * (y - cy) + (xx - cx) * (xx - cx);
                    const double m = opacity * std::exp(-d2 / (2.0 * radius * radius));
                    for (int ch = 0; ch < x.c; ++ch) {
                        const double color = kColor[ch % 3];
                        out.at(in, ch, y, xx) = clamp01(out.at(in, ch, y, xx) * (1.0 - m) + color * m);
                    }
                }
            }
        }
    }
    return out;
}

// Standard luminance quantization matrix (JPEG Annex K).
constexpr int kQuantBase[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

// In-process JPEG round trip per channel: 8x8 block DCT, quantize at the
// given quality, dequantize, inverse DCT. No chroma subsampling, no entropy
// coding; only the quantization loss matters here.
Tensor4 jpeg_transcode(const Tensor4& x, int quality) {
    const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
    double quant[64];
    for (int i = 0; i < 64; ++i) {
        double q = std::floor((kQuantBase[i] * scale + 50.0) / 100.0);
        quant[i] = std::min(255.0, std::max(1.0, q));
    }

    double cosine[8][8];  // cosine[u][t] = cos((2t+1) u pi / 16)
    for (int u = 0; u < 8; ++u)
        for (int t = 0; t < 8; ++t)
            cosine[u][t] = std::cos((2.0 * t + 1.0) * u * M_PI / 16.0);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);

    const int bh = (x.h + 7) / 8;
    const int bw = (x.w + 7) / 8;
    Tensor4 out = x;
    const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const int in = static_cast<int>(p / x.c);
        const int ch = static_cast<int>(p % x.c);
        for (int by = 0; by < bh; ++by) {
            for (int bx = 0; bx < bw; ++bx) {
                double block[8][8];
                for (int y = 0; y < 8; ++y)
                    for (int xx = 0; xx < 8; ++xx) {
                        const int sy = std::min(by * 8 + y, x.h - 1);  // edge-replicated pad
                        const int sx = std::min(bx * 8 + xx, x.w - 1);
                        block[y][xx] = x.at(in, ch, sy, sx) * 255.0 - 128.0;
                    }
                double coef[8][8];
                for (int u = 0; u < 8; ++u) {
                    for (int v = 0; v < 8; ++v) {
                        double acc = 0.0;
                        for (int y = 0; y < 8; ++y)
                            for (int xx = 0; xx < 8; ++xx)
                                acc += block[y][xx] * cosine[u][y] * cosine[v][xx];
                        const double cu = u == 0 ? inv_sqrt2 : 1.0;
                        const double cv = v == 0 ? inv_sqrt2 : 1.0;
                        const double q = quant[u * 8 + v];
                        coef[u][v] = std::round(0.25 * cu * cv * acc / q) * q;
                    }
                }
                for (int y = 0; y < 8; ++y) {
                    for (int xx = 0; xx < 8; ++xx) {
                        const int oy = by * 8 + y;
                        const int ox = bx * 8 + xx;
                        if (oy >= x.h || ox >= x.w) continue;
                        double acc = 0.0;
                        for (int u = 0; u < 8; ++u)
                            for (int v = 0; v < 8; ++v) {
                                const double cu = u == 0 ? inv_sqrt2 : 1.0;
                                const double cv = v == 0 ? inv_sqrt2 : 1.0;
                                acc += cu * cv * coef[u][v] * cosine[u][y] * cosine[v][xx];
                            }
                        out.at(in, ch, oy, ox) = clamp01((0.25 * acc + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void check_increasing(const std::array<T, 5>& a, const char* what) {
    for (int i = 1; i < 5; ++i)
        if (!(a[i] > a[i - 1]))
            throw ConfigError(std::string("severity table: ") + what +
                              " must increase strictly with level");
}

template <typename T>
void check_decreasing(const std::array<T, 5>& a, const char* what) {
    for (int i = 1; i < 5; ++i)
        if (!(a[i] < a[i - 1]))
            throw ConfigError(std::string("severity table: ") + what +
                              " must decrease strictly with level");
}

}  // namespace

const std::vector<CorruptionKind>& all_corruption_kinds() {
    static const std::vector<CorruptionKind> kinds = {
        CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,  CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,  CorruptionKind::DefocusBlur,
        CorruptionKind::Spatter,       CorruptionKind::Jpeg};
    return kinds;
}

std::string corruption_name(CorruptionKind kind) {
    switch (kind) {
        case CorruptionKind::GaussianNoise: return "gaussian_noise";
        case CorruptionKind::ShotNoise: return "shot_noise";
        case CorruptionKind::ImpulseNoise: return "impulse_noise";
        case CorruptionKind::SpeckleNoise: return "speckle_noise";
        case CorruptionKind::GaussianBlur: return "gaussian_blur";
        case CorruptionKind::DefocusBlur: return "defocus_blur";
        case CorruptionKind::Spatter: return "spatter";
        case CorruptionKind::Jpeg: return "jpeg";
    }
    throw ArgumentError("corruption: unknown kind");
}

CorruptionKind corruption_from_name(const std::string& name) {
    for (CorruptionKind kind : all_corruption_kinds())
        if (corruption_name(kind) == name) return kind;
    throw ArgumentError("corruption: unknown kind name '" + name + "'");
}

void SeverityTable::validate() const {
    check_increasing(gaussian_sigma, "gaussian_sigma");
    check_decreasing(shot_lambda, "shot_lambda");
    check_increasing(impulse_amount, "impulse_amount");
    check_increasing(speckle_sigma, "speckle_sigma");
    check_increasing(blur_sigma, "blur_sigma");
    check_increasing(defocus_radius, "defocus_radius");
    check_increasing(spatter_blobs, "spatter_blobs");
    check_increasing(spatter_opacity, "spatter_opacity");
    check_decreasing(jpeg_quality, "jpeg_quality");
    if (gaussian_sigma[0] <= 0 || speckle_sigma[0] <= 0 || blur_sigma[0] <= 0)
        throw ConfigError("severity table: sigmas must be positive");
    if (shot_lambda[4] <= 0) throw ConfigError("severity table: lambdas must be positive");
    if (impulse_amount[0] <= 0 || impulse_amount[4] >= 1)
        throw ConfigError("severity table: impulse amounts must lie in (0,1)");
    if (defocus_radius[0] < 1) throw ConfigError("severity table: radii must be >= 1");
    if (spatter_blobs[0] < 1) throw ConfigError("severity table: blob counts must be >= 1");
    if (spatter_opacity[0] <= 0 || spatter_opacity[4] > 1)
        throw ConfigError("severity table: opacities must lie in (0,1]");
    if (jpeg_quality[4] < 1 || jpeg_quality[0] > 100)
        throw ConfigError("severity table: qualities must lie in 1..100");
}

Tensor4 apply_corruption(const Tensor4& image, CorruptionKind kind, int level,
                         std::uint64_t seed, const SeverityTable& table) {
    if (level < 0 || level > 5)
        throw ArgumentError("corruption: level must lie in 1..5 (0 = identity hook), got " +
                            std::to_string(level));
    table.validate();
    check_image(image);
    if (level == 0) return image;

    const int i = level - 1;
    const std::uint64_t kind_seed =
        hash_combine(hash_combine(seed, corruption_name(kind)), static_cast<std::uint64_t>(level));
    switch (kind) {
        case CorruptionKind::GaussianNoise:
            return gaussian_noise(image, table.gaussian_sigma[i], kind_seed);
        case CorruptionKind::ShotNoise:
            return shot_noise(image, table.shot_lambda[i], kind_seed);
        case CorruptionKind::ImpulseNoise:
            return impulse_noise(image, table.impulse_amount[i], kind_seed);
        case CorruptionKind::SpeckleNoise:
            return speckle_noise(image, table.speckle_sigma[i], kind_seed);
        case CorruptionKind::GaussianBlur:
            return gaussian_blur(image, table.blur_sigma[i]);
        case CorruptionKind::DefocusBlur:
            return defocus_blur(image, table.defocus_radius[i]);
        case CorruptionKind::Spatter:
            return spatter(image, table.spatter_blobs[i], table.spatter_opacity[i], level, kind_seed);
        case CorruptionKind::Jpeg:
            return jpeg_transcode(image, table.jpeg_quality[i]);
    }
    throw ArgumentError("corruption: unknown kind");
}

SweepTable sweep(const std::vector<Tensor4>& images, const std::vector<LabelMap>& gts,
                 const ToyBackbone& bb, const DenseHead& dense,
                 const ClassifierBank& bank, double tau,
                 const std::vector<CorruptionKind>& kinds,
                 const std::vector<int>& levels, std::uint64_t seed,
                 const SeverityTable& table) {
    if (images.empty() || images.size() != gts.size())
        throw ArgumentError("sweep: need matching image and label lists");
    if (kinds.empty()) throw ArgumentError("sweep: no corruption kinds given");
    if (levels.empty()) throw ArgumentError("sweep: no levels given");
    for (int level : levels)
        if (level < 1 || level > 5) throw ArgumentError("sweep: levels must lie in 1..5");
    std::vector<int> sorted_levels = levels;
    std::sort(sorted_levels.begin(), sorted_levels.end());
    if (std::adjacent_find(sorted_levels.begin(), sorted_levels.end()) != sorted_levels.end())
        throw ArgumentError("sweep: duplicate level");
    table.validate();

    const int k = bank.rows();
    std::vector<int> everything(k);
    std::iota(everything.begin(), everything.end(), 0);

    auto evaluate = [&](bool corrupt, CorruptionKind kind, int level) {
        ConfusionMatrix cm(k);
        for (std::size_t i = 0; i < images.size(); ++i) {
            const std::uint64_t image_seed = hash_combine(seed, static_cast<std::uint64_t>(i));
            Tensor4 input = corrupt ? apply_corruption(images[i], kind, level, image_seed, table)
                                    : images[i];
            Segmentation seg = segment(input, bb, dense, bank, tau, gts[i].h, gts[i].w);
            accumulate(cm, seg.labels, gts[i]);
        }
        return miou(cm, everything);
    };

    SweepTable result;
    result.kinds = kinds;
    result.levels = sorted_levels;
    result.clean_miou = evaluate(false, CorruptionKind::GaussianNoise, 1);
    result.miou = Matrix(static_cast<int>(kinds.size()), static_cast<int>(sorted_levels.size()));
    for (std::size_t r = 0; r < kinds.size(); ++r)
        for (std::size_t c = 0; c < sorted_levels.size(); ++c)
            result.miou.at(static_cast<int>(r), static_cast<int>(c)) =
                evaluate(true, kinds[r], sorted_levels[c]);
    return result;
}

void write_sweep_csv(const SweepTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("sweep: cannot open '" + path + "' for writing");
    out << "kind";
    for (int level : table.levels) out << ",level" << level;
    out << "\n";
    out << "none";
    for (std::size_t c = 0; c < table.levels.size(); ++c)
        out << "," << format_percent(table.clean_miou);
    out << "\n";
    for (std::size_t r = 0; r < table.kinds.size(); ++r) {
        out << corruption_name(table.kinds[r]);
        for (std::size_t c = 0; c < table.levels.size(); ++c)
            out << ","
                << format_percent(table.miou.at(static_cast<int>(r), static_cast<int>(c)));
        out << "\n";
    }
    if (!out.flush()) throw DataError("sweep: failed writing '" + path + "'");
}

}  // namespace dseg
