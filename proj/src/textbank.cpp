#include "dseg/textbank.hpp"

#include <fstream>
#include <set>

#include "dseg/ops.hpp"
#include "dseg/rng.hpp"

namespace dseg {

namespace {

constexpr const char* kPlaceholder = "{}";

int placeholder_count(const std::string& s) {
    int n = 0;
    for (std::size_t at = s.find(kPlaceholder); at != std::string::npos;
         at = s.find(kPlaceholder, at + 2))
        ++n;
    return n;
}

}  // namespace

void PromptTemplateSet::validate() const {
    if (templates.empty()) {
        throw ConfigError("template set is empty");
    }
    for (std::size_t i = 0; i < templates.size(); ++i) {
        const int n = placeholder_count(templates[i]);
        if (n != 1) {
            throw ConfigError("template " + std::to_string(i + 1) + " has " +
                              std::to_string(n) + " placeholders, expected one: \"" +
                              templates[i] + "\"");
        }
    }
}

PromptTemplateSet PromptTemplateSet::defaults() {
    return PromptTemplateSet{{
        "a photo of a {}",
        "there is a {} in the scene",
        "a photo of the small {}",
        "a photo of the large {}",
        "a blurry photo of a {}",
        "a cropped photo of a {}",
        "a close-up photo of a {}",
        "an image containing a {}",
    }};
}

PromptTemplateSet PromptTemplateSet::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open template file: " + path);
    }
    PromptTemplateSet set;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (placeholder_count(line) != 1) {
            throw DataError("template file " + path + " line " +
                            std::to_string(lineno) + ": expected exactly one {}");
        }
        set.templates.push_back(line);
    }
    if (set.templates.empty()) {
        throw DataError("template file " + path + " contains no templates");
    }
    return set;
}

std::string fill_template(const std::string& tmpl, const std::string& name) {
    const std::size_t at = tmpl.find(kPlaceholder);
    if (at == std::string::npos) {
        throw ConfigError("template has no placeholder: \"" + tmpl + "\"");
    }
    std::string out = tmpl;
    out.replace(at, 2, name);
    return out;
}

std::vector<double> encode_text(const std::string& s, const ToyTextEncoder& enc) {
    if (s.empty()) {
        throw ArgumentError("encode_text: empty string");
    }
    if (enc.dim < 1) {
        throw ConfigError("encode_text: embedding dim must be >= 1");
    }
    Rng rng(hash_combine(enc.seed, std::string_view(s)));
    std::vector<double> v(enc.dim);
    for (double& x : v) x = rng.normal();
    return l2_normalize(v);
}

std::vector<double> build_class_embedding(
    const std::string& name, const PromptTemplateSet& templates,
    const std::function<std::vector<double>(const std::string&)>& encode) {
    templates.validate();
    std::vector<double> mean;
    for (const std::string& t : templates.templates) {
        const std::vector<double> e = encode(fill_template(t, name));
        if (mean.empty()) {
            mean.assign(e.size(), 0.0);
        } else if (e.size() != mean.size()) {
            throw ConfigError("encoder returned inconsistent dimensions");
        }
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
    }
    for (double& x : mean) x /= static_cast<double>(templates.templates.size());
    return l2_normalize(mean);  // throws DegenerateVectorError on cancellation
}

std::vector<double> build_class_embedding(const std::string& name,
                                          const PromptTemplateSet& templates,
                                          const ToyTextEncoder& enc) {
    return build_class_embedding(
        name, templates, [&](const std::string& s) { return encode_text(s, enc); });
}

ClassifierBank build_bank(const std::vector<std::string>& names,
                          const PromptTemplateSet& templates, const ToyTextEncoder& enc,
                          bool with_background, std::uint64_t background_seed) {
    if (names.empty()) {
        throw ConfigError("build_bank: no class names");
    }
    std::set<std::string> distinct(names.begin(), names.end());
    if (distinct.size() != names.size()) {
        throw ConfigError("build_bank: duplicate class names");
    }
    ClassifierBank bank;
    bank.names = names;
    bank.has_background = with_background;
    const int k = static_cast<int>(names.size());
    bank.embeddings = Matrix(k + (with_background ? 1 : 0), enc.dim);
    for (int r = 0; r < k; ++r) {
        const std::vector<double> e = build_class_embedding(names[r], templates, enc);
        std::copy(e.begin(), e.end(), bank.embeddings.row(r));
    }
    if (with_background) {
        Rng rng(hash_combine(background_seed, std::string_view("background-row")));
        std::vector<double> v(enc.dim);
        for (double& x : v) x = rng.normal();
        const std::vector<double> u = l2_normalize(v);
        std::copy(u.begin(), u.end(), bank.embeddings.row(k));
    }
    return bank;
}

ConvParams bank_as_conv(const ClassifierBank& bank) {
    if (bank.rows() == 0 || bank.dim() == 0) {
        throw ConfigError("bank_as_conv: empty bank");
    }
    ConvParams p;
    p.weight = Tensor4(bank.rows(), bank.dim(), 1, 1);
    std::copy(bank.embeddings.a.begin(), bank.embeddings.a.end(),
              p.weight.data.begin());
    p.bias.assign(bank.rows(), 0.0);
    return p;
}

}  // namespace dseg
