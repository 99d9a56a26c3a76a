#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "dseg/metrics.hpp"
#include "dseg/rng.hpp"
#include "ref/reference.hpp"

using dseg::ConfusionMatrix;
using dseg::LabelMap;
using dseg::SplitSpec;

namespace {

ConfusionMatrix example_cm() {
    // gt = [0,0,1,1], pred = [0,1,1,1]
    ConfusionMatrix cm(2);
    LabelMap gt(1, 2, 2), pred(1, 2, 2);
    gt.ids = {0, 0, 1, 1};
    pred.ids = {0, 1, 1, 1};
    accumulate(cm, pred, gt);
    return cm;
}

}  // namespace

TEST_CASE("accumulate counts non-ignored pixels by gt row and pred column") {
    ConfusionMatrix cm(3);
    LabelMap gt(1, 2, 3), pred(1, 2, 3);
    gt.ids = {0, 1, 2, 0, 1, 2};
    pred.ids = {0, 1, 2, 0, 1, 2};
    accumulate(cm, pred, gt);
    CHECK(cm.total() == 6);
    for (int g = 0; g < 3; ++g)
        for (int p = 0; p < 3; ++p) CHECK(cm.at(g, p) == (g == p ? 2u : 0u));

    // Ignored gt pixels leave the matrix untouched.
    LabelMap ign(1, 2, 3);
    for (auto& v : ign.ids) v = dseg::kIgnoreIndex;
    const ConfusionMatrix before = cm;
    accumulate(cm, pred, ign);
    CHECK(cm.counts == before.counts);

    const ConfusionMatrix ex = example_cm();
    CHECK(ex.at(0, 0) == 1);
    CHECK(ex.at(0, 1) == 1);
    CHECK(ex.at(1, 0) == 0);
    CHECK(ex.at(1, 1) == 2);
}

TEST_CASE("accumulate validates ids and dims") {
    ConfusionMatrix cm(2);
    LabelMap gt(1, 1, 2), pred(1, 1, 2);
    gt.ids = {0, 2};  // class 2 out of range
    pred.ids = {0, 0};
    CHECK_THROWS_AS(accumulate(cm, pred, gt), dseg::DataError);
    gt.ids = {0, 0};
    pred.ids = {0, 3};
    CHECK_THROWS_AS(accumulate(cm, pred, gt), dseg::DataError);
    LabelMap small(1, 1, 1);
    CHECK_THROWS_AS(accumulate(cm, small, gt), dseg::ConfigError);
}

TEST_CASE("merge is exact, commutative, and shard-order invariant") {
    ConfusionMatrix zero(2);
    const ConfusionMatrix a = example_cm();
    CHECK(merge(a, zero).counts == a.counts);
    ConfusionMatrix b(2);
    b.at(0, 0) = 5;
    b.at(1, 0) = 7;
    CHECK(merge(a, b).counts == merge(b, a).counts);
    ConfusionMatrix three(3);
    CHECK_THROWS_AS(merge(a, three), dseg::ConfigError);

    // Sharded accumulation equals one pass over the whole set.
    dseg::Rng rng(21);
    std::vector<LabelMap> gts, preds;
    ConfusionMatrix single(3);
    for (int i = 0; i < 12; ++i) {
        LabelMap gt(1, 5, 5), pred(1, 5, 5);
        for (auto& v : gt.ids)
            v = static_cast<std::uint8_t>(rng.below(4) == 3 ? dseg::kIgnoreIndex
                                                            : rng.below(3));
        for (auto& v : pred.ids) v = static_cast<std::uint8_t>(rng.below(3));
        accumulate(single, pred, gt);
        gts.push_back(gt);
        preds.push_back(pred);
    }
    ConfusionMatrix shard1(3), shard2(3), shard3(3);
    for (int i = 0; i < 12; ++i) {
        ConfusionMatrix& shard = i < 3 ? shard1 : (i < 9 ? shard2 : shard3);
        accumulate(shard, preds[i], gts[i]);
    }
    const ConfusionMatrix merged = merge(merge(shard1, shard2), shard3);
    CHECK(merged.counts == single.counts);
    // Associativity, exact in integers.
    CHECK(merge(shard1, merge(shard2, shard3)).counts == merged.counts);
}

TEST_CASE("iou_per_class handles the worked example and absent classes") {
    ConfusionMatrix perfect(3);
    perfect.at(0, 0) = 4;
    perfect.at(1, 1) = 9;
    // class 2 absent entirely
    const auto iou = iou_per_class(perfect);
    CHECK(iou[0].present);
    CHECK(iou[0].value == 1.0);
    CHECK(iou[1].value == 1.0);
    CHECK_FALSE(iou[2].present);

    const auto ex = iou_per_class(example_cm());
    CHECK(ex[0].value == 0.5);
    CHECK(ex[1].value == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("miou averages present subset classes") {
    const ConfusionMatrix cm = example_cm();
    CHECK(miou(cm, {0, 1}) == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
    CHECK(miou(cm, {1}) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    ConfusionMatrix perfect(2);
    perfect.at(0, 0) = 3;
    perfect.at(1, 1) = 5;
    CHECK(miou(perfect, {0, 1}) == 1.0);

    ConfusionMatrix sparse(3);
    sparse.at(0, 0) = 2;
    CHECK_THROWS_AS(miou(sparse, {1, 2}), dseg::UndefinedMetricError);
    CHECK_THROWS_AS(miou(sparse, {}), dseg::ArgumentError);
    CHECK_THROWS_AS(miou(sparse, {5}), dseg::ArgumentError);
}

TEST_CASE("hiou reproduces published harmonic means") {
    CHECK(std::abs(dseg::hiou(88.8, 86.1) - 87.4) < 0.05);
    CHECK(std::abs(dseg::hiou(82.7, 35.6) - 49.8) < 0.05);
    CHECK(dseg::hiou(42.0, 42.0) == 42.0);
    CHECK(dseg::hiou(77.0, 0.0) == 0.0);
    CHECK(dseg::hiou(0.0, 0.0) == 0.0);
    CHECK_THROWS_AS(dseg::hiou(-1.0, 2.0), dseg::ArgumentError);

    dseg::Rng rng(22);
    for (int i = 0; i < 200; ++i) {
        const double s = rng.uniform(0.0, 100.0);
        const double u = rng.uniform(0.0, 100.0);
        const double h = dseg::hiou(s, u);
        CHECK(h <= 2.0 * std::min(s, u) + 1e-12);
        CHECK(h <= (s + u) / 2.0 + 1e-12);
    }
}

TEST_CASE("pacc and macc follow the worked example") {
    const ConfusionMatrix cm = example_cm();
    CHECK(pacc(cm, {0, 1}) == 0.75);
    CHECK(pacc(cm, {1}) == 1.0);
    CHECK(macc(cm, {0, 1}) == 0.75);

    ConfusionMatrix perfect(2);
    perfect.at(0, 0) = 3;
    perfect.at(1, 1) = 5;
    CHECK(pacc(perfect, {0, 1}) == 1.0);
    CHECK(macc(perfect, {0, 1}) == 1.0);

    ConfusionMatrix sparse(3);
    sparse.at(0, 0) = 2;
    CHECK(macc(sparse, {0, 1}) == 1.0);  // class 1 has no gt pixels, excluded
    CHECK_THROWS_AS(pacc(sparse, {1, 2}), dseg::UndefinedMetricError);
    CHECK_THROWS_AS(macc(sparse, {1, 2}), dseg::UndefinedMetricError);
}

TEST_CASE("split specs must partition the class ids") {
    SplitSpec ok{{0, 2}, {1}};
    CHECK_NOTHROW(ok.validate(3));
    CHECK(ok.all() == std::vector<int>{0, 1, 2});
    SplitSpec overlap{{0, 1}, {1, 2}};
    CHECK_THROWS_AS(overlap.validate(3), dseg::ConfigError);
    SplitSpec gap{{0}, {2}};
    CHECK_THROWS_AS(gap.validate(3), dseg::ConfigError);
    SplitSpec range{{0, 3}, {1, 2}};
    CHECK_THROWS_AS(range.validate(3), dseg::ConfigError);
}

TEST_CASE("every metric matches the per-pixel recount oracle exactly") {
    dseg::Rng rng(23);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = rng.range(2, 3);
        LabelMap gt(1, 6, 6), pred(1, 6, 6);
        for (auto& v : gt.ids)
            v = static_cast<std::uint8_t>(rng.below(5) == 4 ? dseg::kIgnoreIndex
                                                            : rng.below(k));
        for (auto& v : pred.ids) v = static_cast<std::uint8_t>(rng.below(k));

        ConfusionMatrix cm(k);
        accumulate(cm, pred, gt);
        const auto oracle =
            dseg::ref::count_pixels_naive(gt, pred, k, dseg::kIgnoreIndex);

        // Integer counts first: rows, columns, diagonal.
        for (int c = 0; c < k; ++c) {
            CHECK(cm.at(c, c) == oracle.tp[c]);
            CHECK(cm.row_sum(c) == oracle.gt_total[c]);
            CHECK(cm.col_sum(c) == oracle.pred_total[c]);
        }

        // Derived ratios: same integer numerator/denominator, same double.
        const auto iou = iou_per_class(cm);
        double miou_sum = 0.0;
        int miou_n = 0;
        double macc_sum = 0.0;
        int macc_n = 0;
        std::uint64_t correct = 0, total = 0;
        for (int c = 0; c < k; ++c) {
            const std::uint64_t denom =
                oracle.gt_total[c] + oracle.pred_total[c] - oracle.tp[c];
            CHECK(iou[c].present == (denom > 0));
            if (denom > 0) {
                CHECK(iou[c].value == static_cast<double>(oracle.tp[c]) /
                                          static_cast<double>(denom));
                miou_sum += static_cast<double>(oracle.tp[c]) /
                            static_cast<double>(denom);
                ++miou_n;
            }
            if (oracle.gt_total[c] > 0) {
                macc_sum += static_cast<double>(oracle.tp[c]) /
                            static_cast<double>(oracle.gt_total[c]);
                ++macc_n;
            }
            correct += oracle.tp[c];
            total += oracle.gt_total[c];
        }
        std::vector<int> everything(k);
        for (int c = 0; c < k; ++c) everything[c] = c;
        if (miou_n > 0) CHECK(miou(cm, everything) == miou_sum / miou_n);
        if (macc_n > 0) CHECK(macc(cm, everything) == macc_sum / macc_n);
        if (total > 0)
            CHECK(pacc(cm, everything) ==
                  static_cast<double>(correct) / static_cast<double>(total));
    }
}

TEST_CASE("confusion CSV round-trips and normalized rows are stochastic") {
    ConfusionMatrix cm(3);
    dseg::Rng rng(24);
    for (auto& v : cm.counts) v = rng.below(1000);
    cm.at(2, 0) = 0;
    cm.at(2, 1) = 0;
    cm.at(2, 2) = 0;  // an empty gt row

    const std::string p1 = "cm_test.csv", p2 = "cm_norm_test.csv";
    dseg::write_confusion_csv(cm, p1);
    const ConfusionMatrix back = dseg::read_confusion_csv(p1);
    CHECK(back.k == cm.k);
    CHECK(back.counts == cm.counts);

    dseg::write_confusion_normalized_csv(cm, p2);
    std::ifstream in(p2);
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        double sum = 0.0;
        while (std::getline(ss, cell, ',')) sum += std::stod(cell);
        if (row < 2) {
            CHECK(std::abs(sum - 1.0) < 1e-9);
        } else {
            CHECK(sum == 0.0);
        }
        ++row;
    }
    CHECK(row == 3);
    std::remove(p1.c_str());
    std::remove(p2.c_str());

    CHECK_THROWS_AS(dseg::read_confusion_csv("missing_cm.csv"), dseg::DataError);
    {
        std::ofstream bad("cm_bad.csv");
        bad << "1,2\n3\n";
    }
    CHECK_THROWS_AS(dseg::read_confusion_csv("cm_bad.csv"), dseg::DataError);
    std::remove("cm_bad.csv");
}

TEST_CASE("report CSV values match recomputation from the matrix file") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 50;
    cm.at(0, 1) = 5;
    cm.at(0, 2) = 2;
    cm.at(1, 0) = 7;
    cm.at(1, 1) = 40;
    cm.at(1, 2) = 3;
    cm.at(2, 0) = 1;
    cm.at(2, 1) = 6;
    cm.at(2, 2) = 30;
    const SplitSpec split{{0, 1}, {2}};

    const std::string cm_path = "cm_rt.csv", report_path = "report_rt.csv";
    dseg::write_confusion_csv(cm, cm_path);
    dseg::write_report_csv(compute_report(cm, split), report_path);

    const ConfusionMatrix loaded = dseg::read_confusion_csv(cm_path);
    const dseg::MetricsReport want = compute_report(loaded, split);

    std::map<std::string, std::string> lines;
    std::ifstream in(report_path);
    std::string line;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        REQUIRE(comma != std::string::npos);
        lines[line.substr(0, comma)] = line.substr(comma + 1);
    }
    CHECK(lines.at("miou_seen") == dseg::format_percent(want.miou_seen));
    CHECK(lines.at("miou_unseen") == dseg::format_percent(want.miou_unseen));
    CHECK(lines.at("miou") == dseg::format_percent(want.miou_all));
    CHECK(lines.at("hiou") == dseg::format_percent(want.hiou));
    CHECK(lines.at("pacc") == dseg::format_percent(want.pacc_all));
    CHECK(lines.at("macc") == dseg::format_percent(want.macc_all));
    CHECK(lines.at("iou_0") == dseg::format_percent(want.iou[0].value));
    CHECK(lines.at("acc_2") == dseg::format_percent(want.acc[2].value));

    // The harmonic mean sits between its defining identities.
    CHECK(want.hiou ==
          2.0 * want.miou_seen * want.miou_unseen / (want.miou_seen + want.miou_unseen));

    std::remove(cm_path.c_str());
    std::remove(report_path.c_str());
}
