#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "openseg/errors.hpp"
#include "openseg/losses.hpp"

using namespace openseg;

namespace {

ScoreMatrix uniform_scores(int k, int columns) {
    ScoreMatrix s;
    s.logits = torch::zeros({k, columns + 1}, torch::kFloat64);
    for (int c = 0; c < columns; ++c) s.column_class_ids.push_back(c);
    return s;
}

ForwardOutput random_output(int k, int columns, int blocks, int side, std::uint64_t seed) {
    torch::manual_seed(seed);
    ForwardOutput out;
    std::vector<int> ids;
    for (int c = 0; c < columns; ++c) ids.push_back(c);
    auto head = [&] {
        HeadOutput h;
        h.scores.logits = torch::randn({k, columns + 1}, torch::kFloat64);
        h.scores.column_class_ids = ids;
        h.masks.logits = torch::randn({k, side, side}, torch::kFloat64) * 3.0;
        return h;
    };
    for (int b = 0; b + 1 < blocks; ++b) out.aux.push_back(head());
    out.final = head();
    return out;
}

GroundTruthSet random_gt(int g, int columns, int side, std::uint64_t seed) {
    torch::manual_seed(seed);
    GroundTruthSet gt;
    gt.masks = (torch::rand({g, side, side}) > 0.6).to(torch::kFloat64);
    for (int i = 0; i < g; ++i) {
        gt.masks[i][0][0] = 1.0;
        gt.class_ids.push_back(i % columns);
        gt.prompt_columns.push_back(i % columns);
    }
    return gt;
}

}  // namespace

TEST(Matching, TrivialCases) {
    auto one = hungarian_match(torch::zeros({1, 1}, torch::kFloat64));
    ASSERT_EQ(one.pairs.size(), 1u);
    EXPECT_EQ(one.pairs[0], std::make_pair(0, 0));

    auto anti = hungarian_match(torch::tensor({1.0, 2.0, 2.0, 1.0}, torch::kFloat64).reshape({2, 2}));
    EXPECT_EQ(anti.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));

    auto diag = brute_force_match(1.0 - torch::eye(3, torch::kFloat64));
    EXPECT_EQ(diag.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}}));

    auto empty = hungarian_match(torch::zeros({4, 0}, torch::kFloat64));
    EXPECT_TRUE(empty.pairs.empty());
    EXPECT_EQ(empty.unmatched_queries.size(), 4u);
}

TEST(Matching, AgreesWithBruteForce) {
    std::mt19937_64 gen(123);
    for (int trial = 0; trial < 100; ++trial) {
        const int g = 1 + static_cast<int>(gen() % 5);
        const int k = g + static_cast<int>(gen() % 3);
        torch::manual_seed(trial);
        // Integer costs provoke ties, which exercises the tie rule.
        auto cost = trial % 2 ? torch::randint(0, 4, {k, g}).to(torch::kFloat64) : torch::rand({k, g}, torch::kFloat64);
        auto h = hungarian_match(cost);
        auto b = brute_force_match(cost);
        EXPECT_EQ(assignment_cost(cost, h), assignment_cost(cost, b));
        EXPECT_EQ(h.pairs, b.pairs);
    }
}

TEST(Matching, Errors) {
    EXPECT_THROW(brute_force_match(torch::zeros({8, 8}, torch::kFloat64)), SizeError);
    EXPECT_THROW(hungarian_match(torch::zeros({2, 3}, torch::kFloat64)), CapacityError);
    auto bad = torch::zeros({2, 2}, torch::kFloat64);
    bad[0][1] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(hungarian_match(bad), ValidationError);
}

TEST(Losses, DiceFixtures) {
    auto logits = torch::full({2, 2}, 30.0, torch::kFloat64);
    auto gt = torch::tensor({1.0, 1.0, 0.0, 0.0}, torch::kFloat64).reshape({2, 2});
    EXPECT_NEAR(dice_loss(logits, gt).item<double>(), 2.0 / 7.0, 1e-9);
    auto exact = torch::where(gt > 0, torch::full_like(gt, 30.0), torch::full_like(gt, -30.0));
    EXPECT_LE(dice_loss(exact, gt).item<double>(), 1e-6);
    auto d = dice_loss(-exact, gt).item<double>();
    EXPECT_GT(d, 0.6);
    EXPECT_LE(d, 1.0);
}

TEST(Losses, BceFixtures) {
    EXPECT_NEAR(mask_bce_loss(torch::zeros({3, 3}, torch::kFloat64), torch::ones({3, 3}, torch::kFloat64)).item<double>(),
                std::log(2.0), 1e-9);
    EXPECT_NEAR(mask_bce_loss(torch::ones({1, 1}, torch::kFloat64), torch::ones({1, 1}, torch::kFloat64)).item<double>(),
                std::log1p(std::exp(-1.0)), 1e-9);
    EXPECT_THROW(mask_bce_loss(torch::zeros({2, 2}), torch::zeros({2, 3})), ShapeError);
}

TEST(Losses, PairwiseMatchesScalar) {
    torch::manual_seed(8);
    auto pred = torch::randn({3, 10}, torch::kFloat64);
    auto gt = (torch::rand({2, 10}) > 0.5).to(torch::kFloat64);
    auto pd = pairwise_dice(pred, gt), pb = pairwise_bce(pred, gt);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j) {
            EXPECT_NEAR(pd[i][j].item<double>(), dice_loss(pred[i], gt[j]).item<double>(), 1e-12);
            EXPECT_NEAR(pb[i][j].item<double>(), mask_bce_loss(pred[i], gt[j]).item<double>(), 1e-12);
        }
    }
}

TEST(Losses, ClassificationFixtures) {
    GroundTruthSet none;
    none.masks = torch::zeros({0, 2, 2}, torch::kFloat64);
    Assignment unmatched;
    unmatched.unmatched_queries = {0, 1, 2};
    // uniform over 4 columns; every query unmatched, weight 1 isolates ln 4
    EXPECT_NEAR(classification_loss(uniform_scores(3, 3), unmatched, none, 1.0).item<double>(), std::log(4.0), 1e-12);

    GroundTruthSet one;
    one.masks = torch::ones({1, 2, 2}, torch::kFloat64);
    one.class_ids = {1};
    one.prompt_columns = {1};
    Assignment a;
    a.pairs = {{0, 0}};
    a.unmatched_queries = {1};
    const double expected = (std::log(3.0) + 0.1 * std::log(3.0)) / 2.0;
    EXPECT_NEAR(classification_loss(uniform_scores(2, 2), a, one).item<double>(), expected, 1e-12);

    auto saturated = uniform_scores(2, 2);
    saturated.logits[0][1] = 1e3;
    saturated.logits[1][2] = 1e3;
    EXPECT_NEAR(classification_loss(saturated, a, one).item<double>(), 0.0, 1e-9);

    one.prompt_columns = {5};
    EXPECT_THROW(classification_loss(uniform_scores(2, 2), a, one), ValidationError);
}

TEST(Losses, SameClassColumnsReduceByMax) {
    ScoreMatrix s;
    s.logits = torch::tensor({1.0, 3.0, 2.0, 0.5}, torch::kFloat64).reshape({1, 4});
    s.column_class_ids = {4, 7, 4};
    auto g = ClassGroups::of(s.column_class_ids);
    EXPECT_EQ(g.class_ids, (std::vector<int>{4, 7}));
    auto r = reduce_by_class(s, g);
    EXPECT_TRUE(torch::equal(r, torch::tensor({2.0, 3.0, 0.5}, torch::kFloat64).reshape({1, 3})));
}

TEST(Losses, TotalLossInvariantToGtOrder) {
    auto out = random_output(6, 3, 3, 8, 1);
    auto gt = random_gt(4, 3, 8, 2);
    LossWeights w;
    const double base = total_loss(out, gt, w).loss.item<double>();
    for (auto order : std::vector<std::vector<int>>{{3, 2, 1, 0}, {1, 3, 0, 2}}) {
        const double p = total_loss(out, gt.permuted(order), w).loss.item<double>();
        EXPECT_NEAR(p, base, 1e-9 * std::abs(base));
    }
}

TEST(Losses, TotalLossIsHomogeneousInWeights) {
    auto out = random_output(5, 2, 2, 6, 3);
    auto gt = random_gt(2, 2, 6, 4);
    LossWeights w;
    const double a = total_loss(out, gt, w).loss.item<double>();
    const double b = total_loss(out, gt, w.scaled(2.0)).loss.item<double>();
    EXPECT_NEAR(b, 2.0 * a, 1e-9 * std::abs(a));
}

TEST(Losses, EmptyGroundTruthLeavesNoObjectTerm) {
    auto out = random_output(4, 2, 1, 4, 5);
    GroundTruthSet gt;
    gt.masks = torch::zeros({0, 4, 4}, torch::kFloat64);
    LossWeights w;
    Assignment all;
    all.unmatched_queries = {0, 1, 2, 3};
    const double expected = w.cls * classification_loss(out.final.scores, all, gt, w.no_object).item<double>();
    auto r = total_loss(out, gt, w);
    EXPECT_NEAR(r.loss.item<double>(), expected, 1e-12);
    EXPECT_TRUE(r.assignment.pairs.empty());
}
