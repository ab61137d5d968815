#include <gtest/gtest.h>

#include "openseg/errors.hpp"
#include "openseg/fusion.hpp"
#include "openseg/inference.hpp"
#include "openseg/losses.hpp"
#include "openseg/synthdata.hpp"

using namespace openseg;

namespace {

PromptTokens make_tokens(std::vector<std::vector<double>> rows, std::vector<int> ids, Modality m) {
    std::vector<Tensor> r;
    for (auto& row : rows) r.push_back(torch::tensor(row, torch::kFloat64));
    PromptTokens t;
    t.embeddings = torch::stack(r);
    t.class_ids = std::move(ids);
    t.modality = m;
    return t;
}

SegDecoderConfig small_decoder() {
    SegDecoderConfig c;
    c.width = 16;
    c.num_queries = 4;
    c.heads = 2;
    c.ffn_dim = 32;
    c.decoder_blocks = 1;
    return c;
}

PoolConfig small_pool() { return PoolConfig{{{"p8", 8, 8, 5}}, "p8", 8, 7}; }

Tensor square_mask(int size, int r0, int r1, int c0, int c1) {
    auto m = torch::zeros({size, size}, torch::kUInt8);
    m.index_put_({torch::indexing::Slice(r0, r1), torch::indexing::Slice(c0, c1)}, 1);
    return m;
}

// Two queries with full-confidence classes and hand-set mask logits.
HeadOutput two_query_head(const Tensor& mask_a, const Tensor& mask_b) {
    HeadOutput h;
    h.scores.logits = torch::tensor({50.0, 0.0, 0.0, 0.0, 50.0, 0.0}, torch::kFloat64).reshape({2, 3});
    h.scores.column_class_ids = {0, 1};
    h.masks.logits = torch::stack({mask_a.to(torch::kFloat64) * 40.0 - 20.0, mask_b.to(torch::kFloat64) * 40.0 - 20.0});
    return h;
}

}  // namespace

TEST(Fusion, HandAveragedExamples) {
    auto v = make_tokens({{1, 0}, {0, 1}}, {3, 3}, Modality::Visual);
    auto t = make_tokens({{0.5, 0.5}}, {3}, Modality::Text);
    auto f = fuse_prompts(v, t);
    ASSERT_EQ(f.class_ids, (std::vector<int>{3}));
    EXPECT_TRUE(torch::allclose(f.embeddings[0], torch::tensor({0.5, 0.5}, torch::kFloat64)));
    EXPECT_EQ(f.modality, Modality::Fused);

    auto same = make_tokens({{0.25, -2.0}}, {1}, Modality::Visual);
    auto same_t = make_tokens({{0.25, -2.0}}, {1}, Modality::Text);
    EXPECT_TRUE(torch::equal(fuse_prompts(same, same_t).embeddings, same.embeddings));

    auto only_text = make_tokens({{7, 8}, {1, 2}}, {2, 0}, Modality::Text);
    auto mixed = fuse_prompts(same, only_text);
    EXPECT_EQ(mixed.class_ids, (std::vector<int>{0, 1, 2}));
    EXPECT_TRUE(torch::equal(mixed.embeddings[0], only_text.embeddings[1]));
    EXPECT_TRUE(torch::equal(mixed.embeddings[2], only_text.embeddings[0]));

    auto wide = make_tokens({{1, 2, 3}}, {1}, Modality::Text);
    EXPECT_THROW(fuse_prompts(same, wide), ShapeError);
}

TEST(Inference, PanopticSuppressesHiddenInstance) {
    auto a = square_mask(8, 0, 6, 0, 6);
    auto b = square_mask(8, 1, 5, 1, 5);  // fully inside a
    auto r = postprocess(two_query_head(a, b), 8, 8, Thresholds{});
    ASSERT_EQ(r.instances.size(), 2u);
    ASSERT_EQ(r.segments.size(), 1u);
    EXPECT_EQ(r.segments[0].class_id, 0);
    EXPECT_TRUE(torch::equal(r.panoptic > 0, a.to(torch::kBool)));
}

TEST(Inference, StuffClassesMergeIntoOneSegment) {
    auto a = square_mask(8, 0, 3, 0, 8);
    auto b = square_mask(8, 5, 8, 0, 8);
    HeadOutput h = two_query_head(a, b);
    h.scores.logits = torch::tensor({50.0, 0.0, 0.0, 50.0, 0.0, 0.0}, torch::kFloat64).reshape({2, 3});
    auto r = postprocess(h, 8, 8, Thresholds{}, {true, false});
    ASSERT_EQ(r.segments.size(), 1u);
    EXPECT_FALSE(r.segments[0].is_thing);
    EXPECT_EQ((r.panoptic == r.segments[0].id).sum().item<int64_t>(), 48);
}

TEST(Inference, SemanticLiesInsideInstanceMasks) {
    auto a = square_mask(8, 0, 5, 0, 5);
    auto b = square_mask(8, 3, 8, 3, 8);
    auto r = postprocess(two_query_head(a, b), 8, 8, Thresholds{});
    for (int c : {0, 1}) {
        auto uni = torch::zeros({8, 8}, torch::kBool);
        for (const auto& inst : r.instances) {
            if (inst.class_id == c) uni |= inst.mask;
        }
        EXPECT_FALSE(((r.semantic == c) & ~uni).any().item<bool>());
    }
    EXPECT_TRUE((r.semantic.masked_select(~(a | b).to(torch::kBool)) == kNoClass).all().item<bool>());
    // panoptic ids tile the claimed pixels without overlap
    EXPECT_TRUE(torch::equal(r.panoptic > 0, (a | b).to(torch::kBool)) || r.segments.size() == 1u);
}

TEST(Inference, LowScoreQueriesAreDropped) {
    auto a = square_mask(8, 0, 4, 0, 4);
    HeadOutput h = two_query_head(a, a);
    h.scores.logits = torch::zeros({2, 3}, torch::kFloat64);
    auto r = postprocess(h, 8, 8, Thresholds{});
    EXPECT_TRUE(r.instances.empty());
    EXPECT_TRUE((r.semantic == kNoClass).all().item<bool>());
}

TEST(Inference, MasksUpsampleToInputSize) {
    // a full-width band has a single straight edge, so bilinear upsampling keeps it exact
    auto a = square_mask(4, 0, 2, 0, 4);
    auto r = postprocess(two_query_head(a, a), 16, 16, Thresholds{});
    ASSERT_FALSE(r.instances.empty());
    EXPECT_EQ(r.instances[0].mask.sizes(), (std::vector<int64_t>{16, 16}));
    EXPECT_EQ(r.instances[0].mask.sum().item<int64_t>(), 128);
    for (const auto& i : r.instances) {
        EXPECT_GE(i.confidence, 0.0);
        EXPECT_LE(i.confidence, 1.0);
    }
}

TEST(Inference, EmptyModalityEqualsSingleModality) {
    SegModel model(small_pool(), small_decoder(), torch::kFloat32, 4);
    torch::manual_seed(1);
    auto img = torch::rand({3, 32, 32});
    ClassVocabulary vocab({"circle", "square"});
    PromptBundle text_only;
    text_only.text = model.pool().encode_text_prompts({0, 1}, vocab);
    PromptBundle with_empty = text_only;
    with_empty.visual = model.no_visual();
    auto a = segment(model, img, text_only);
    auto b = segment(model, img, with_empty);
    EXPECT_EQ(a.mode, Modality::Text);
    EXPECT_EQ(b.mode, Modality::Text);
    EXPECT_TRUE(torch::equal(a.semantic, b.semantic));
    EXPECT_EQ(a.instances.size(), b.instances.size());
    EXPECT_THROW(segment(model, img, PromptBundle{}), ValidationError);
}

TEST(Inference, NonFiniteModelIsRejected) {
    SegModel model(small_pool(), small_decoder(), torch::kFloat32, 4);
    {
        torch::NoGradGuard g;
        model.decoder()->query_embeddings().fill_(std::numeric_limits<float>::quiet_NaN());
    }
    PromptBundle b;
    b.text = model.pool().encode_text_prompts({0}, ClassVocabulary({"circle"}));
    EXPECT_THROW(segment(model, torch::rand({3, 32, 32}), b), ModelStateError);
}

TEST(Inference, FewShotPromptsConcatenate) {
    ModelPool pool(small_pool());
    torch::manual_seed(2);
    auto img = torch::rand({3, 32, 32});
    auto m = square_mask(32, 4, 20, 4, 20);
    std::vector<Exemplar> ex(5, Exemplar{img, {m}, {2}});
    auto t = build_fewshot_prompts(pool, ex);
    EXPECT_EQ(t.size(), 5);
    EXPECT_EQ(ClassGroups::of(t.class_ids).size(), 1);
    EXPECT_EQ(build_fewshot_prompts(pool, {ex[0]}).size(), 1);
    EXPECT_THROW(build_fewshot_prompts(pool, {}), ValidationError);
}

TEST(Inference, ExtraExemplarNeverLowersClassScore) {
    torch::manual_seed(3);
    for (int trial = 0; trial < 20; ++trial) {
        ScoreMatrix few;
        few.logits = torch::randn({5, 3}, torch::kFloat64);
        few.column_class_ids = {0, 1};
        ScoreMatrix more;
        auto extra = torch::randn({5, 2}, torch::kFloat64);
        more.logits = torch::cat({few.logits.narrow(1, 0, 2), extra, few.logits.narrow(1, 2, 1)}, 1);
        more.column_class_ids = {0, 1, 0, 0};
        auto a = reduce_by_class(few, ClassGroups::of(few.column_class_ids));
        auto b = reduce_by_class(more, ClassGroups::of(more.column_class_ids));
        EXPECT_TRUE((b.narrow(1, 0, 1) >= a.narrow(1, 0, 1)).all().item<bool>());
        EXPECT_TRUE(torch::equal(b.narrow(1, 1, 2), a.narrow(1, 1, 2)));
    }
}

TEST(Inference, MemoryBankFifoWithPin) {
    auto tok = [](int id) { return PromptTokens{torch::full({1, 2}, static_cast<double>(id)), {id}, Modality::Visual, {}}; };
    MemoryBank bank(3, true);
    for (int i = 0; i < 10; ++i) {
        bank.push(tok(i));
        EXPECT_LE(bank.size(), 3);
        EXPECT_EQ(bank.entry_ids().front(), 0);
    }
    EXPECT_EQ(std::vector<int>(bank.entry_ids().begin(), bank.entry_ids().end()), (std::vector<int>{0, 8, 9}));
    EXPECT_EQ(bank.tokens().class_ids, (std::vector<int>{0, 8, 9}));

    MemoryBank single(1, true);
    for (int i = 0; i < 4; ++i) single.push(tok(i));
    EXPECT_EQ(single.tokens().class_ids, (std::vector<int>{0}));

    MemoryBank unpinned(2, false);
    for (int i = 0; i < 4; ++i) unpinned.push(tok(i));
    EXPECT_EQ(unpinned.tokens().class_ids, (std::vector<int>{2, 3}));
    EXPECT_THROW(MemoryBank(0), ConfigError);
}

TEST(Inference, SingleFrameVideoReturnsGroundTruth) {
    SegModel model(small_pool(), small_decoder(), torch::kFloat32, 6);
    SceneSpec spec;
    spec.image_size = 32;
    spec.min_size = 8;
    spec.max_size = 14;
    auto video = generate_video(spec, 1, 1.0, 3);
    ASSERT_FALSE(video.object_ids.empty());
    auto r = propagate_video(model, video.frames, video.masks[0], video.object_ids, 4);
    ASSERT_EQ(r.frames.size(), 1u);
    const auto& f = r.frames[0];
    ASSERT_EQ(f.instances.size(), video.object_ids.size());
    for (std::size_t o = 0; o < video.object_ids.size(); ++o) {
        EXPECT_TRUE(torch::equal(f.semantic == video.object_ids[o], video.masks[0][static_cast<int64_t>(o)].to(torch::kBool)));
    }
    EXPECT_TRUE(r.pinned_survived);
    EXPECT_THROW(propagate_video(model, video.frames, torch::zeros_like(video.masks[0]), video.object_ids, 4), ValidationError);
}

TEST(Inference, BankNeverExceedsCapacityDuringPropagation) {
    SegModel model(small_pool(), small_decoder(), torch::kFloat32, 7);
    SceneSpec spec;
    spec.image_size = 32;
    spec.min_size = 8;
    spec.max_size = 14;
    auto video = generate_video(spec, 6, 1.0, 4);
    Thresholds lenient;
    lenient.score = 0.0;
    auto r = propagate_video(model, video.frames, video.masks[0], video.object_ids, 2, lenient);
    EXPECT_EQ(r.frames.size(), 6u);
    EXPECT_LE(r.max_bank_size, 2);
    EXPECT_TRUE(r.pinned_survived);
}
