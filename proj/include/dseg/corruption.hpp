#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dseg/encoder.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

enum class CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    GaussianBlur,
    DefocusBlur,
    Spatter,
    Jpeg,
};

const std::vector<CorruptionKind>& all_corruption_kinds();
std::string corruption_name(CorruptionKind kind);
CorruptionKind corruption_from_name(const std::string& name);

// Severity coefficients per kind, level 1..5 left to right. Values follow the
// published constants of the common corruption suite where public; every
// field can be overridden through the run config.
struct SeverityTable {
    std::array<double, 5> gaussian_sigma{0.08, 0.12, 0.18, 0.26, 0.38};
    std::array<double, 5> shot_lambda{60, 25, 12, 5, 3};  // lower = noisier
    std::array<double, 5> impulse_amount{0.03, 0.06, 0.09, 0.17, 0.27};
    std::array<double, 5> speckle_sigma{0.15, 0.20, 0.35, 0.45, 0.60};
    std::array<double, 5> blur_sigma{1, 2, 3, 4, 6};
    std::array<int, 5> defocus_radius{3, 4, 6, 8, 10};
    std::array<int, 5> spatter_blobs{4, 7, 10, 14, 18};
    std::array<double, 5> spatter_opacity{0.30, 0.40, 0.50, 0.60, 0.70};
    std::array<int, 5> jpeg_quality{25, 18, 15, 10, 7};  // lower = worse

    // Coefficients must be strictly monotone toward more distortion.
    void validate() const;
};

// Applies one corruption at the given severity. Level 0 is an identity test
// hook; levels 1..5 are the real sweep. Noise draws are keyed on
// (seed, element index), so results never depend on evaluation order.
// Input values must lie in [0,1]; output is clamped back to [0,1].
Tensor4 apply_corruption(const Tensor4& image, CorruptionKind kind, int level,
                         std::uint64_t seed,
                         const SeverityTable& table = SeverityTable{});

// Robustness table: mIoU of a frozen model per (kind, level), plus the clean
// baseline. Per-image corruption seeds are hash(seed, image index).
struct SweepTable {
    double clean_miou = 0.0;
    std::vector<CorruptionKind> kinds;
    std::vector<int> levels;  // ascending, subset of 1..5
    Matrix miou;              // kinds x levels, values in [0,1]
};

SweepTable sweep(const std::vector<Tensor4>& images, const std::vector<LabelMap>& gts,
                 const ToyBackbone& bb, const DenseHead& dense,
                 const ClassifierBank& bank, double tau,
                 const std::vector<CorruptionKind>& kinds,
                 const std::vector<int>& levels, std::uint64_t seed,
                 const SeverityTable& table = SeverityTable{});

// CSV: header then one row per kind; the "none" row repeats the clean mIoU in
// every level column. Values are percentages with one decimal.
void write_sweep_csv(const SweepTable& table, const std::string& path);

}  // namespace dseg
