#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dseg/tensor.hpp"

namespace dseg {

// Ordered prompt templates, each containing exactly one `{}` placeholder.
struct PromptTemplateSet {
    std::vector<std::string> templates;

    // Throws ConfigError unless non-empty with exactly one placeholder each.
    void validate() const;

    // Built-in desk-scale ensemble (8 templates).
    static PromptTemplateSet defaults();

    // One template per line, blank lines skipped. Errors carry line numbers.
    static PromptTemplateSet from_file(const std::string& path);
};

// Deterministic stand-in for a text encoder: a string hashes to a PRNG seed,
// the PRNG fills a d-vector with standard normals, the result is normalized.
struct ToyTextEncoder {
    int dim = 64;
    std::uint64_t seed = 0;
};

// Classifier rows in class-id order. Text-derived rows are frozen; if a
// background row is present it is the last row and the only trainable one.
struct ClassifierBank {
    std::vector<std::string> names;  // class names; excludes the background row
    Matrix embeddings;               // (K or K+1) x d, background last
    bool has_background = false;

    int rows() const { return embeddings.rows; }
    int dim() const { return embeddings.cols; }
    bool trainable(int row) const {
        return has_background && row == embeddings.rows - 1;
    }
};

std::string fill_template(const std::string& tmpl, const std::string& name);

std::vector<double> encode_text(const std::string& s, const ToyTextEncoder& enc);

// Mean of the per-template embeddings, re-normalized. The encoder is a
// callable so tests can inject engineered embeddings.
std::vector<double> build_class_embedding(
    const std::string& name, const PromptTemplateSet& templates,
    const std::function<std::vector<double>(const std::string&)>& encode);
std::vector<double> build_class_embedding(const std::string& name,
                                          const PromptTemplateSet& templates,
                                          const ToyTextEncoder& enc);

// background_seed only matters when with_background is set.
ClassifierBank build_bank(const std::vector<std::string>& names,
                          const PromptTemplateSet& templates, const ToyTextEncoder& enc,
                          bool with_background, std::uint64_t background_seed);

// The bank as a 1x1 convolution: out channel r = dot(feature, row r).
ConvParams bank_as_conv(const ClassifierBank& bank);

}  // namespace dseg
