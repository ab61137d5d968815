#include <gtest/gtest.h>

#include "openseg/errors.hpp"
#include "openseg/model_pool.hpp"

using namespace openseg;

namespace {

std::vector<EncoderSpec> two_stubs() { return {{"a", 8, 16, 11}, {"b", 16, 12, 22}}; }

Tensor random_image(int size, std::uint64_t seed) {
    torch::manual_seed(seed);
    return torch::rand({3, size, size});
}

}  // namespace

TEST(ModelPool, ZeroImageGivesZeroFeatures) {
    auto f = encode_image(torch::zeros({3, 32, 32}), two_stubs());
    ASSERT_EQ(f.features.size(), 2u);
    for (const auto& g : f.features) EXPECT_EQ(g.abs().max().item<float>(), 0.0f);
}

TEST(ModelPool, EncodingIsBitIdentical) {
    auto img = random_image(64, 1);
    auto a = encode_image(img, two_stubs());
    auto b = encode_image(img, two_stubs());
    for (std::size_t i = 0; i < a.features.size(); ++i) EXPECT_TRUE(torch::equal(a.features[i], b.features[i]));
    ModelPool p1(PoolConfig::desk()), p2(PoolConfig::desk());
    EXPECT_EQ(p1.checksum(), p2.checksum());
}

TEST(ModelPool, GridsResampledToFinestStride) {
    auto f = encode_image(random_image(64, 2), {{"s8", 8, 16, 1}, {"s16", 16, 16, 2}});
    ASSERT_EQ(f.features.size(), 2u);
    for (const auto& g : f.features) {
        EXPECT_EQ(g.size(1), 8);
        EXPECT_EQ(g.size(2), 8);
    }
    EXPECT_EQ(f.total_channels(), 32);
}

TEST(ModelPool, RejectsBadImages) {
    EXPECT_THROW(encode_image(torch::zeros({3, 36, 36}), two_stubs()), ShapeError);
    EXPECT_THROW(encode_image(torch::zeros({1, 32, 32}), two_stubs()), ShapeError);
    auto nan = torch::zeros({3, 32, 32});
    nan[0][0][0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(encode_image(nan, two_stubs()), ValidationError);
}

TEST(ModelPool, MaskPoolAveragesForegroundCells) {
    auto features = torch::tensor({1.0, 3.0, 5.0, 7.0}).reshape({1, 2, 2});
    auto mask = torch::tensor({1, 1, 0, 0}, torch::kUInt8).reshape({2, 2});
    EXPECT_DOUBLE_EQ(mask_pool(features, mask).item<double>(), 2.0);
}

TEST(ModelPool, ConstantFeatureGivesConstantToken) {
    auto c = torch::tensor({0.5, -1.0, 2.0});
    auto features = c.view({3, 1, 1}).expand({3, 4, 4}).contiguous();
    auto mask = torch::zeros({4, 4}, torch::kUInt8);
    mask[1][2] = 1;
    mask[3][0] = 1;
    EXPECT_TRUE(torch::allclose(mask_pool(features, mask), c));
}

TEST(ModelPool, DownsampleKeepsArgmaxCellOfThinMask) {
    auto mask = torch::zeros({16, 16}, torch::kUInt8);
    mask.index_put_({torch::indexing::Slice(9, 11), 13}, 1);
    auto cells = downsample_mask(mask, 8);
    EXPECT_EQ(cells.sum().item<int64_t>(), 1);
    EXPECT_EQ(cells[1][1].item<int64_t>(), 1);
}

TEST(ModelPool, EmptyMaskRaises) {
    ModelPool pool(PoolConfig::desk());
    auto img = random_image(64, 3);
    EXPECT_THROW(pool.encode_visual_prompts(img, {torch::zeros({64, 64}, torch::kUInt8)}, {0}), EmptyMaskError);
    auto m = torch::ones({64, 64}, torch::kUInt8);
    EXPECT_THROW(pool.encode_visual_prompts(img, {m, m}, {0}), ValidationError);
}

TEST(ModelPool, VisualTokensFollowMaskOrder) {
    ModelPool pool(PoolConfig::desk());
    auto img = random_image(64, 4);
    auto a = torch::zeros({64, 64}, torch::kUInt8), b = torch::zeros({64, 64}, torch::kUInt8);
    a.index_put_({torch::indexing::Slice(0, 24), torch::indexing::Slice(0, 24)}, 1);
    b.index_put_({torch::indexing::Slice(32, 64), torch::indexing::Slice(16, 48)}, 1);
    auto ab = pool.encode_visual_prompts(img, {a, b}, {0, 1});
    auto ba = pool.encode_visual_prompts(img, {b, a}, {1, 0});
    EXPECT_EQ(ab.modality, Modality::Visual);
    EXPECT_TRUE(torch::equal(ab.embeddings[0], ba.embeddings[1]));
    EXPECT_TRUE(torch::equal(ab.embeddings[1], ba.embeddings[0]));
    EXPECT_EQ(ba.class_ids, (std::vector<int>{1, 0}));
}

TEST(ModelPool, PooledTokenIsAreaWeightedMeanOfParts) {
    ModelPool pool(PoolConfig::desk());
    auto img = random_image(64, 5);
    auto whole = torch::zeros({64, 64}, torch::kUInt8);
    whole.index_put_({torch::indexing::Slice(8, 40), torch::indexing::Slice(8, 32)}, 1);
    auto top = whole.clone(), bottom = whole.clone();
    top.index_put_({torch::indexing::Slice(24, 64)}, 0);
    bottom.index_put_({torch::indexing::Slice(0, 24)}, 0);
    auto t = pool.encode_visual_prompts(img, {whole, top, bottom}, {0, 0, 0}).embeddings.to(torch::kFloat64);
    const double n_top = downsample_mask(top, 8).sum().item<double>();
    const double n_bottom = downsample_mask(bottom, 8).sum().item<double>();
    auto mixed = (t[1] * n_top + t[2] * n_bottom) / (n_top + n_bottom);
    EXPECT_TRUE(torch::allclose(t[0], mixed, 1e-5, 1e-6));
}

TEST(ModelPool, TextTokens) {
    ClassVocabulary vocab({"circle", "square", "triangle"});
    ModelPool pool(PoolConfig::desk());
    auto empty = pool.encode_text_prompts({}, vocab);
    EXPECT_EQ(empty.embeddings.size(0), 0);
    auto twice = pool.encode_text_prompts({2, 2}, vocab);
    EXPECT_EQ(twice.modality, Modality::Text);
    EXPECT_TRUE(torch::equal(twice.embeddings[0], twice.embeddings[1]));
    EXPECT_THROW(pool.encode_text_prompts({3}, vocab), VocabularyError);
    auto a = encode_text_prompts({0, 1}, vocab, 7);
    auto b = encode_text_prompts({0, 1}, vocab, 8);
    EXPECT_FALSE(torch::equal(a.embeddings, b.embeddings));
}

TEST(ModelPool, VocabularyRejectsDuplicates) {
    EXPECT_THROW(ClassVocabulary({"a", "a"}), VocabularyError);
    ClassVocabulary v({"a", "b"}, {false, true});
    EXPECT_EQ(v.id_of("b"), 1);
    EXPECT_TRUE(v.is_stuff(1));
    EXPECT_THROW(v.id_of("c"), VocabularyError);
}
