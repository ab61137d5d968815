#include <gtest/gtest.h>

#include "openseg/errors.hpp"
#include "openseg/metrics.hpp"

using namespace openseg;

namespace {

Tensor grid(std::initializer_list<int64_t> values, int h, int w) {
    return torch::tensor(std::vector<int64_t>(values), torch::kLong).reshape({h, w});
}

Tensor rect(int h, int w, int r0, int r1, int c0, int c1) {
    auto m = torch::zeros({h, w}, torch::kBool);
    m.index_put_({torch::indexing::Slice(r0, r1), torch::indexing::Slice(c0, c1)}, true);
    return m;
}

}  // namespace

TEST(Metrics, MiouFixtures) {
    auto gt = grid({1, 1, kNoClass, kNoClass}, 2, 2);
    auto pred = grid({1, kNoClass, 1, kNoClass}, 2, 2);
    auto r = miou(pred, gt, 2);
    EXPECT_NEAR(r.miou, 1.0 / 3.0, 1e-9);
    EXPECT_EQ(r.per_class.size(), 1u);
    EXPECT_DOUBLE_EQ(miou(gt, gt, 2).miou, 1.0);
    auto shifted = grid({kNoClass, kNoClass, 1, 1}, 2, 2);
    EXPECT_DOUBLE_EQ(miou(shifted, gt, 2).miou, 0.0);
    EXPECT_THROW(miou(grid({1, 1}, 1, 2), gt, 2), ShapeError);
}

TEST(Metrics, MiouIgnoresVoidPixels) {
    auto gt = grid({0, kIgnoreLabel, 0, 0}, 2, 2);
    auto pred = grid({0, 1, 0, 0}, 2, 2);
    auto r = miou(pred, gt, 2);
    EXPECT_DOUBLE_EQ(r.miou, 1.0);
    EXPECT_EQ(r.per_class.count(1), 0u);
}

TEST(Metrics, AccumulatorPoolsOverImages) {
    IouAccumulator acc(1);
    acc.add(grid({0, 0}, 1, 2), grid({0, kNoClass}, 1, 2));  // i=1 u=2
    acc.add(grid({0, 0}, 1, 2), grid({0, 0}, 1, 2));          // i=2 u=2
    EXPECT_NEAR(acc.result().miou, 3.0 / 4.0, 1e-12);
}

TEST(Metrics, PanopticQualityFixtures) {
    // gt 10 pixels; pred covers 8 of them: IoU 0.8; plus one false positive.
    auto gt_mask = rect(4, 5, 0, 2, 0, 5);
    auto pred_mask = rect(4, 5, 0, 2, 0, 4);
    auto fp_mask = rect(4, 5, 3, 4, 0, 2);
    auto r = panoptic_quality({{pred_mask, 0}, {fp_mask, 0}}, {{gt_mask, 0}});
    EXPECT_NEAR(r.pq, 0.8 / 1.5, 1e-9);
    EXPECT_NEAR(r.pq, r.sq * r.rq, 1e-12);
    EXPECT_EQ(r.tp, 1);
    EXPECT_EQ(r.fp, 1);

    auto same = panoptic_quality({{gt_mask, 0}}, {{gt_mask, 0}});
    EXPECT_DOUBLE_EQ(same.pq, 1.0);
}

TEST(Metrics, PanopticIouHalfIsNotAMatch) {
    auto gt_mask = rect(2, 4, 0, 2, 0, 2);    // 4 pixels
    auto half = rect(2, 4, 0, 1, 0, 2);       // 2 pixels inside gt: IoU exactly 0.5
    auto r = panoptic_quality({{half, 0}}, {{gt_mask, 0}});
    EXPECT_EQ(r.tp, 0);
    EXPECT_EQ(r.fp, 1);
    EXPECT_EQ(r.fn, 1);
    EXPECT_DOUBLE_EQ(r.pq, 0.0);
}

TEST(Metrics, OverlappingSegmentsRejected) {
    auto a = rect(3, 3, 0, 2, 0, 2), b = rect(3, 3, 1, 3, 1, 3);
    EXPECT_THROW(check_partition({{a, 0}, {b, 1}}), ValidationError);
    EXPECT_THROW(panoptic_quality({{a, 0}, {b, 1}}, {}), ValidationError);
}

TEST(Metrics, AveragePrecisionFixtures) {
    auto gt = rect(10, 10, 0, 10, 0, 9);  // 90 pixels
    auto good = rect(10, 10, 0, 10, 0, 10);  // IoU 0.9
    auto bad = rect(10, 10, 0, 1, 0, 10);    // 9 / 91 < 0.5
    ImageDetections img;
    img.ground_truth = {{gt, 0}};
    img.predictions = {{good, 0, 0.9}, {bad, 0, 0.8}};
    auto ap = average_precision({img}, {0.5});
    EXPECT_NEAR(ap.at(0.5), 1.0, 1e-9);

    ImageDetections perfect;
    perfect.ground_truth = {{gt, 0}, {bad, 1}};
    perfect.predictions = {{gt, 0, 0.7}, {bad, 1, 0.6}};
    auto p = average_precision({perfect});
    EXPECT_DOUBLE_EQ(p.at(0.5), 1.0);
    EXPECT_DOUBLE_EQ(p.at(0.75), 1.0);

    ImageDetections empty;
    empty.ground_truth = {{gt, 0}};
    EXPECT_DOUBLE_EQ(average_precision({empty}).at(0.5), 0.0);

    ImageDetections invalid = img;
    invalid.predictions[0].confidence = 1.5;
    EXPECT_THROW(average_precision({invalid}), ValidationError);
}

TEST(Metrics, AveragePrecisionLowerRankedHitIsHalfCredit) {
    auto gt = rect(4, 4, 0, 2, 0, 2);
    auto miss = rect(4, 4, 2, 4, 2, 4);
    ImageDetections img;
    img.ground_truth = {{gt, 0}};
    img.predictions = {{miss, 0, 0.9}, {gt, 0, 0.5}};
    EXPECT_NEAR(average_precision({img}, {0.5}).at(0.5), 0.5, 1e-12);
}

TEST(Metrics, RemovingFalsePositiveNeverHurts) {
    auto gt = rect(4, 4, 0, 2, 0, 2);
    auto miss = rect(4, 4, 2, 4, 2, 4);
    ImageDetections with;
    with.ground_truth = {{gt, 0}};
    with.predictions = {{miss, 0, 0.9}, {gt, 0, 0.5}};
    ImageDetections without = with;
    without.predictions.erase(without.predictions.begin());
    EXPECT_GE(average_precision({without}).at(0.5), average_precision({with}).at(0.5));
    EXPECT_GE(panoptic_quality({{gt, 0}}, {{gt, 0}}).pq, panoptic_quality({{gt, 0}, {miss, 0}}, {{gt, 0}}).pq);
}

TEST(Metrics, ReportText) {
    MetricReport r;
    r.miou = 0.5;
    r.per_class_iou = {{0, 0.5}};
    r.pq = 0.25;
    r.ap = {{0.5, 0.75}};
    auto text = r.to_text({"circle"});
    EXPECT_NE(text.find("miou="), std::string::npos);
    EXPECT_NE(text.find("circle"), std::string::npos);
}
