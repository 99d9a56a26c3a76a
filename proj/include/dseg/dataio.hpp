#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dseg/metrics.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

enum class ShapeFamily { Rectangle, Circle, Triangle };

std::string shape_name(ShapeFamily family);
ShapeFamily shape_from_name(const std::string& name);

struct SceneClass {
    int id = 0;
    std::string name;               // may contain spaces ("red square")
    std::array<double, 3> color{};  // prototype color in [0,1]
    ShapeFamily family = ShapeFamily::Rectangle;
    bool seen = true;
};

// Recipe for a synthetic scene set: flat-colored shapes on a flat background,
// exact labels, and an ignore band along every label boundary.
struct SceneSpec {
    int height = 64;
    int width = 64;
    std::vector<SceneClass> classes;  // ids dense 0..K-1, in order
    int background_class = 0;         // fills everything no object covers
    int min_objects = 1;
    int max_objects = 4;
    int min_object_size = 12;  // bounding-box side, pixels
    int max_object_size = 26;
    int margin = 4;            // clearance between objects and the canvas edge
    int ignore_border = 1;     // Chebyshev width of the boundary ignore band
    double color_jitter = 0.02;        // per-object uniform wobble per channel
    double min_color_distance = 0.3;   // pairwise L2 between prototypes

    void validate() const;  // ConfigError naming the offending field
};

// The benchmark scene used throughout the tools: a dark backdrop plus five
// bright shape classes, four seen and two unseen.
SceneSpec benchmark_scene_spec();

struct ManifestClass {
    int id = 0;
    std::string name;
    std::array<double, 3> color{};
    bool seen = true;
};

// On-disk dataset description. All file paths are relative to the manifest.
struct DatasetManifest {
    int version = 1;
    int ignore_index = kIgnoreIndex;
    std::uint64_t seed = 0;
    std::vector<ManifestClass> classes;
    std::vector<std::pair<std::string, std::string>> pairs;  // (image, label)
    std::string base_dir;  // directory of the manifest file; not serialized

    SplitSpec split() const;
    std::vector<std::string> class_names() const;
    Matrix prototypes() const;  // K x 3
    void validate() const;      // field checks only, no file access
};

// Binary portable pixmap (P6, maxval 255) <-> (1, 3, h, w) tensor in [0,1].
void write_image(const Tensor4& image, const std::string& path);
Tensor4 read_image(const std::string& path);

// Binary portable graymap (P5, maxval 255) <-> single-item label map.
// Value 255 is the ignore label everywhere downstream.
void write_labels(const LabelMap& labels, const std::string& path);
LabelMap read_labels(const std::string& path);

void save_manifest(const DatasetManifest& manifest, const std::string& path);
// Parses manifest text without touching the filesystem; `path` only labels
// error messages. Performs no validation and no existence checks.
DatasetManifest parse_manifest_text(const std::string& text, const std::string& path);
// Parses, validates, and checks every referenced file exists.
DatasetManifest load_manifest(const std::string& path);

// Renders `count` scenes into out_dir/images and out_dir/labels and writes
// out_dir/manifest.txt. Pure function of (spec, count, seed).
DatasetManifest gen_dataset(const SceneSpec& spec, int count, std::uint64_t seed,
                            const std::string& out_dir);

// Loads every image/label pair referenced by a manifest, in manifest order.
struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<Tensor4> images;
    std::vector<LabelMap> labels;
};

LoadedDataset load_dataset(const std::string& manifest_path);

}  // namespace dseg
