#include "dseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace dseg {

std::uint64_t ConfusionMatrix::row_sum(int g) const {
    std::uint64_t s = 0;
    for (int p = 0; p < k; ++p) s += at(g, p);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(int p) const {
    std::uint64_t s = 0;
    for (int g = 0; g < k; ++g) s += at(g, p);
    return s;
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t s = 0;
    for (std::uint64_t v : counts) s += v;
    return s;
}

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt,
                int ignore_index) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
        throw ConfigError("accumulate: prediction and ground truth dims differ");
    }
    for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const int g = gt.ids[i];
        if (g == ignore_index) continue;
        const int p = pred.ids[i];
        if (g >= cm.k) {
            throw DataError("accumulate: gt class " + std::to_string(g) +
                            " out of range for " + std::to_string(cm.k) + " classes");
        }
        if (p >= cm.k) {
            throw DataError("accumulate: predicted class " + std::to_string(p) +
                            " out of range for " + std::to_string(cm.k) + " classes");
        }
        ++cm.at(g, p);
    }
}

ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    if (a.k != b.k) {
        throw ConfigError("merge: class counts differ");
    }
    ConfusionMatrix out = a;
    for (std::size_t i = 0; i < out.counts.size(); ++i) out.counts[i] += b.counts[i];
    return out;
}

void SplitSpec::validate(int k) const {
    std::set<int> ids;
    for (const auto* part : {&seen, &unseen}) {
        for (int c : *part) {
            if (c < 0 || c >= k) {
                throw ConfigError("split: class id " + std::to_string(c) +
                                  " out of range");
            }
            if (!ids.insert(c).second) {
                throw ConfigError("split: class id " + std::to_string(c) +
                                  " appears twice");
            }
        }
    }
    if (static_cast<int>(ids.size()) != k) {
        throw ConfigError("split: seen+unseen cover " + std::to_string(ids.size()) +
                          " of " + std::to_string(k) + " classes");
    }
}

std::vector<int> SplitSpec::all() const {
    std::vector<int> ids = seen;
    ids.insert(ids.end(), unseen.begin(), unseen.end());
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<ClassValue> iou_per_class(const ConfusionMatrix& cm) {
    std::vector<ClassValue> out(cm.k);
    for (int c = 0; c < cm.k; ++c) {
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t denom = cm.row_sum(c) + cm.col_sum(c) - tp;
        if (denom > 0) {
            out[c].present = true;
            out[c].value = static_cast<double>(tp) / static_cast<double>(denom);
        }
    }
    return out;
}

namespace {

void check_subset(const ConfusionMatrix& cm, const std::vector<int>& subset,
                  const char* what) {
    if (subset.empty()) {
        throw ArgumentError(std::string(what) + ": empty class subset");
    }
    for (int c : subset) {
        if (c < 0 || c >= cm.k) {
            throw ArgumentError(std::string(what) + ": class id " +
                                std::to_string(c) + " out of range");
        }
    }
}

}  // namespace

double miou(const ConfusionMatrix& cm, const std::vector<int>& subset) {
    check_subset(cm, subset, "miou");
    const std::vector<ClassValue> iou = iou_per_class(cm);
    double sum = 0.0;
    int present = 0;
    for (int c : subset) {
        if (!iou[c].present) continue;
        sum += iou[c].value;
        ++present;
    }
    if (present == 0) {
        throw UndefinedMetricError("miou: no class of the subset occurs in the data");
    }
    return sum / present;
}

double hiou(double s, double u) {
    if (s < 0.0 || u < 0.0) {
        throw ArgumentError("hiou: negative input");
    }
    if (s + u == 0.0) return 0.0;
    return 2.0 * s * u / (s + u);
}

double pacc(const ConfusionMatrix& cm, const std::vector<int>& subset) {
    check_subset(cm, subset, "pacc");
    std::uint64_t correct = 0, total = 0;
    for (int c : subset) {
        correct += cm.at(c, c);
        total += cm.row_sum(c);
    }
    if (total == 0) {
        throw UndefinedMetricError("pacc: subset has no ground-truth pixels");
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

double macc(const ConfusionMatrix& cm, const std::vector<int>& subset) {
    check_subset(cm, subset, "macc");
    double sum = 0.0;
    int present = 0;
    for (int c : subset) {
        const std::uint64_t row = cm.row_sum(c);
        if (row == 0) continue;
        sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
        ++present;
    }
    if (present == 0) {
        throw UndefinedMetricError("macc: subset has no ground-truth pixels");
    }
    return sum / present;
}

MetricsReport compute_report(const ConfusionMatrix& cm, const SplitSpec& split) {
    split.validate(cm.k);
    MetricsReport r;
    r.iou = iou_per_class(cm);
    r.acc.resize(cm.k);
    for (int c = 0; c < cm.k; ++c) {
        const std::uint64_t row = cm.row_sum(c);
        if (row > 0) {
            r.acc[c].present = true;
            r.acc[c].value = static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
        }
    }
    const std::vector<int> everything = split.all();
    r.miou_seen = miou(cm, split.seen);
    r.miou_unseen = miou(cm, split.unseen);
    r.miou_all = miou(cm, everything);
    r.hiou = hiou(r.miou_seen, r.miou_unseen);
    r.pacc_seen = pacc(cm, split.seen);
    r.pacc_unseen = pacc(cm, split.unseen);
    r.pacc_all = pacc(cm, everything);
    r.macc_seen = macc(cm, split.seen);
    r.macc_unseen = macc(cm, split.unseen);
    r.macc_all = macc(cm, everything);
    return r;
}

std::string format_percent(double value01) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", value01 * 100.0);
    return buf;
}

void write_confusion_csv(const ConfusionMatrix& cm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (int g = 0; g < cm.k; ++g) {
        for (int p = 0; p < cm.k; ++p) {
            if (p > 0) out << ',';
            out << cm.at(g, p);
        }
        out << '\n';
    }
    if (!out.good()) throw DataError("write failed: " + path);
}

ConfusionMatrix read_confusion_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::vector<std::uint64_t>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.emplace_back();
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                const std::uint64_t v = std::stoull(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                rows.back().push_back(v);
            } catch (const std::exception&) {
                throw DataError(path + ": bad count '" + cell + "' in row " +
                                std::to_string(rows.size()));
            }
        }
    }
    const int k = static_cast<int>(rows.size());
    if (k == 0) throw DataError(path + ": empty confusion matrix");
    ConfusionMatrix cm(k);
    for (int g = 0; g < k; ++g) {
        if (static_cast<int>(rows[g].size()) != k) {
            throw DataError(path + ": row " + std::to_string(g + 1) + " has " +
                            std::to_string(rows[g].size()) + " cells, expected " +
                            std::to_string(k));
        }
        for (int p = 0; p < k; ++p) cm.at(g, p) = rows[g][p];
    }
    return cm;
}

void write_confusion_normalized_csv(const ConfusionMatrix& cm,
                                    const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    char buf[64];
    for (int g = 0; g < cm.k; ++g) {
        const std::uint64_t row = cm.row_sum(g);
        for (int p = 0; p < cm.k; ++p) {
            if (p > 0) out << ',';
            const double v =
                row == 0 ? 0.0
                         : static_cast<double>(cm.at(g, p)) / static_cast<double>(row);
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << buf;
        }
        out << '\n';
    }
    if (!out.good()) throw DataError("write failed: " + path);
}

void write_report_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "miou_seen," << format_percent(report.miou_seen) << '\n';
    out << "miou_unseen," << format_percent(report.miou_unseen) << '\n';
    out << "miou," << format_percent(report.miou_all) << '\n';
    out << "hiou," << format_percent(report.hiou) << '\n';
    out << "pacc_seen," << format_percent(report.pacc_seen) << '\n';
    out << "pacc_unseen," << format_percent(report.pacc_unseen) << '\n';
    out << "pacc," << format_percent(report.pacc_all) << '\n';
    out << "macc_seen," << format_percent(report.macc_seen) << '\n';
    out << "macc_unseen," << format_percent(report.macc_unseen) << '\n';
    out << "macc," << format_percent(report.macc_all) << '\n';
    for (std::size_t c = 0; c < report.iou.size(); ++c) {
        if (report.iou[c].present)
            out << "iou_" << c << ',' << format_percent(report.iou[c].value) << '\n';
    }
    for (std::size_t c = 0; c < report.acc.size(); ++c) {
        if (report.acc[c].present)
            out << "acc_" << c << ',' << format_percent(report.acc[c].value) << '\n';
    }
    if (!out.good()) throw DataError("write failed: " + path);
}

}  // namespace dseg
