#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/tensor.hpp"

namespace dseg {

// K x K pixel counts, counts[g][p] = pixels of ground-truth class g predicted
// as p. Ignored pixels are never accumulated. Counts are exact integers;
// division happens only when a metric is reported.
struct ConfusionMatrix {
    int k = 0;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int k_)
        : k(k_), counts(static_cast<std::size_t>(k_) * k_, 0) {
        if (k_ < 1) throw ArgumentError("confusion matrix needs at least 1 class");
    }

    std::uint64_t& at(int g, int p) { return counts[static_cast<std::size_t>(g) * k + p]; }
    std::uint64_t at(int g, int p) const {
        return counts[static_cast<std::size_t>(g) * k + p];
    }
    std::uint64_t row_sum(int g) const;
    std::uint64_t col_sum(int p) const;
    std::uint64_t total() const;
};

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt,
                int ignore_index = kIgnoreIndex);

ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b);

// Seen/unseen class-id split; together the two sets cover 0..k-1.
struct SplitSpec {
    std::vector<int> seen;
    std::vector<int> unseen;

    void validate(int k) const;
    std::vector<int> all() const;
};

// A per-class value that may be undefined when the class never occurs.
struct ClassValue {
    bool present = false;
    double value = 0.0;
};

// IoU_c = cm[c][c] / (rowsum_c + colsum_c - cm[c][c]); absent when the
// denominator is zero.
std::vector<ClassValue> iou_per_class(const ConfusionMatrix& cm);

// Mean IoU over the present classes of the subset.
double miou(const ConfusionMatrix& cm, const std::vector<int>& subset);

// Harmonic mean of two non-negative rates; zero when both are zero.
double hiou(double s, double u);

// Subset pixel accuracy: sum of diagonals over sum of subset gt pixels.
double pacc(const ConfusionMatrix& cm, const std::vector<int>& subset);

// Mean per-class recall over subset classes that have gt pixels.
double macc(const ConfusionMatrix& cm, const std::vector<int>& subset);

struct MetricsReport {
    std::vector<ClassValue> iou;  // per class
    std::vector<ClassValue> acc;  // per-class recall
    double miou_seen = 0, miou_unseen = 0, miou_all = 0, hiou = 0;
    double pacc_seen = 0, pacc_unseen = 0, pacc_all = 0;
    double macc_seen = 0, macc_unseen = 0, macc_all = 0;
};

MetricsReport compute_report(const ConfusionMatrix& cm, const SplitSpec& split);

// Integer counts, one gt class per row.
void write_confusion_csv(const ConfusionMatrix& cm, const std::string& path);
ConfusionMatrix read_confusion_csv(const std::string& path);

// Row-stochastic variant for heatmap rendering; all-zero rows stay zero.
void write_confusion_normalized_csv(const ConfusionMatrix& cm, const std::string& path);

// name,value lines; values are percentages with one decimal.
void write_report_csv(const MetricsReport& report, const std::string& path);

// The table format used in report files and CLI output: x100, one decimal.
std::string format_percent(double value01);

}  // namespace dseg
