#include "openseg/segdecoder.hpp"

#include <cmath>
#include <numeric>

#include "openseg/errors.hpp"
#include "openseg/fusion.hpp"

namespace openseg {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

SegDecoderConfig SegDecoderConfig::paper() {
    SegDecoderConfig c;
    c.width = 256;
    c.num_queries = 100;
    c.aligner_blocks = 1;
    c.decoder_blocks = 6;
    c.heads = 8;
    c.ffn_dim = 2048;
    c.mask_mlp_depth = 3;
    return c;
}

SegDecoderConfig SegDecoderConfig::desk() { return SegDecoderConfig{}; }

void SegDecoderConfig::validate() const {
    if (width < 4 || width % 4 != 0) throw ConfigError("model.width must be a positive multiple of 4");
    if (heads < 1 || width % heads != 0) throw ConfigError("model.width must be divisible by model.heads");
    if (num_queries < 1) throw ConfigError("model.num_queries must be >= 1");
    if (aligner_blocks < 0) throw ConfigError("model.aligner_blocks must be >= 0");
    if (decoder_blocks < 1) throw ConfigError("model.decoder_blocks must be >= 1");
    if (ffn_dim < 1) throw ConfigError("model.ffn_dim must be >= 1");
    if (mask_mlp_depth < 1) throw ConfigError("model.mask_mlp_depth must be >= 1");
    if (!(init_temperature > 0.0) || !std::isfinite(init_temperature))
        throw ConfigError("model.init_temperature must be positive");
}

Tensor sine_position_encoding(int channels, int height, int width, torch::Dtype dtype) {
    if (channels % 4 != 0) throw ShapeError("positional encoding needs channels divisible by 4");
    const int npf = channels / 2;
    constexpr double kScale = 2.0 * M_PI;
    constexpr double kEps = 1e-6;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto y = (torch::arange(1, height + 1, opts) / (height + kEps) * kScale).view({height, 1}).expand({height, width});
    auto x = (torch::arange(1, width + 1, opts) / (width + kEps) * kScale).view({1, width}).expand({height, width});
    auto j = torch::arange(npf, opts);
    auto dim_t = torch::pow(10000.0, 2.0 * torch::floor(j / 2.0) / npf);
    auto encode = [&](const Tensor& coord) {
        auto v = coord.reshape({height * width, 1}) / dim_t.view({1, npf});
        auto even = v.index({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)}).sin();
        auto odd = v.index({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)}).cos();
        return torch::stack({even, odd}, 2).reshape({height * width, npf});
    };
    return torch::cat({encode(y), encode(x)}, 1).to(dtype);
}

ScoreMatrix compute_scores(const DecodedState& state, const Tensor& no_object, const Tensor& temperature,
                           std::vector<int> column_class_ids) {
    const auto width = state.queries.size(1);
    std::vector<Tensor> columns;
    if (state.visual.defined() && state.visual.size(0) > 0) columns.push_back(state.visual);
    if (state.text.defined() && state.text.size(0) > 0) columns.push_back(state.text);
    columns.push_back(no_object.reshape({1, width}));
    auto prompts = torch::cat(columns, 0);
    if (static_cast<std::int64_t>(column_class_ids.size()) != prompts.size(0) - 1)
        throw ShapeError("compute_scores: column class ids do not match prompt rows");
    auto q = F::normalize(state.queries, F::NormalizeFuncOptions().dim(1));
    auto p = F::normalize(prompts, F::NormalizeFuncOptions().dim(1));
    ScoreMatrix s;
    s.logits = temperature * q.matmul(p.t());
    s.column_class_ids = std::move(column_class_ids);
    return s;
}

Tensor project_masks(const Tensor& embeddings, const MaskFeature& mask_feature) {
    const auto& g = mask_feature.grid;
    if (embeddings.size(1) != g.size(0)) throw ShapeError("project_masks: width mismatch");
    return embeddings.matmul(g.reshape({g.size(0), -1})).reshape({embeddings.size(0), g.size(1), g.size(2)});
}

namespace {

nn::Linear make_linear(int in, int out, bool xavier = false) {
    nn::Linear l(nn::LinearOptions(in, out));
    torch::NoGradGuard no_grad;
    if (xavier) nn::init::xavier_uniform_(l->weight);
    l->bias.zero_();
    return l;
}

int group_count(int channels) { return std::gcd(channels, 8); }

}  // namespace

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int width, int heads) : heads_(heads) {
    q_ = register_module("q", make_linear(width, width, true));
    k_ = register_module("k", make_linear(width, width, true));
    v_ = register_module("v", make_linear(width, width, true));
    out_ = register_module("out", make_linear(width, width, true));
}

Tensor MultiHeadAttentionImpl::forward(const Tensor& query, const Tensor& key, const Tensor& value) {
    const auto lq = query.size(0), lk = key.size(0), width = query.size(1);
    if (lq == 0) return torch::zeros({0, width}, query.options());
    const auto d = width / heads_;
    auto q = q_(query).view({lq, heads_, d}).transpose(0, 1);
    auto k = k_(key).view({lk, heads_, d}).transpose(0, 1);
    auto v = v_(value).view({lk, heads_, d}).transpose(0, 1);
    auto attn = torch::softmax(q.matmul(k.transpose(1, 2)) / std::sqrt(static_cast<double>(d)), -1);
    return out_(attn.matmul(v).transpose(0, 1).reshape({lq, width}));
}

FeedForwardImpl::FeedForwardImpl(int width, int hidden) {
    fc1_ = register_module("fc1", make_linear(width, hidden));
    fc2_ = register_module("fc2", make_linear(hidden, width));
}

Tensor FeedForwardImpl::forward(const Tensor& x) { return fc2_(F::gelu(fc1_(x))); }

FeatureBlenderImpl::FeatureBlenderImpl(int in_channels, int width) : in_channels_(in_channels) {
    conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1)));
    conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(width, width, 3).padding(1)));
    torch::NoGradGuard no_grad;
    conv1_->bias.zero_();
    conv2_->bias.zero_();
}

BlendedFeature FeatureBlenderImpl::forward(const ImageFeatureSet& features) {
    if (features.features.empty()) throw ShapeError("blend: empty feature set");
    const auto h = features.features.front().size(1), w = features.features.front().size(2);
    for (const auto& f : features.features) {
        if (f.dim() != 3 || f.size(1) != h || f.size(2) != w)
            throw ShapeError("blend: feature grids have mismatched spatial shapes");
    }
    auto x = torch::cat(features.features, 0).to(conv1_->weight.scalar_type());
    if (x.size(0) != in_channels_)
        throw ShapeError("blend: expected " + std::to_string(in_channels_) + " concatenated channels, got " +
                         std::to_string(x.size(0)));
    return {conv2_(F::gelu(conv1_(x.unsqueeze(0)))).squeeze(0)};
}

PromptAdapterImpl::PromptAdapterImpl(int in_dim, int width) : in_dim_(in_dim) {
    proj_ = register_module("proj", make_linear(in_dim, width));
    norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({width})));
}

Tensor PromptAdapterImpl::forward(const Tensor& tokens) {
    const auto width = proj_->weight.size(0);
    if (!tokens.defined() || tokens.size(0) == 0)
        return torch::zeros({0, width}, proj_->weight.options().requires_grad(false));
    if (tokens.dim() != 2 || tokens.size(1) != in_dim_)
        throw ShapeError("prompt adapter expects width " + std::to_string(in_dim_) + ", got " +
                         std::to_string(tokens.dim() == 2 ? tokens.size(1) : -1));
    return norm_(proj_(tokens.to(proj_->weight.scalar_type())));
}

AlignerBlockImpl::AlignerBlockImpl(int width, int heads, int ffn_dim) {
    norm_self_ = register_module("norm_self", nn::LayerNorm(nn::LayerNormOptions({width})));
    norm_cross_q_ = register_module("norm_cross_q", nn::LayerNorm(nn::LayerNormOptions({width})));
    norm_cross_kv_ = register_module("norm_cross_kv", nn::LayerNorm(nn::LayerNormOptions({width})));
    norm_ffn_ = register_module("norm_ffn", nn::LayerNorm(nn::LayerNormOptions({width})));
    self_attn_ = register_module("self_attn", MultiHeadAttention(width, heads));
    cross_attn_ = register_module("cross_attn", MultiHeadAttention(width, heads));
    ffn_ = register_module("ffn", FeedForward(width, ffn_dim));
}

Tensor AlignerBlockImpl::forward(const Tensor& image, const Tensor& prompts, const Tensor& pos) {
    const auto l = image.size(0), p = prompts.size(0);
    auto x = p > 0 ? torch::cat({image, prompts}, 0) : image;
    auto pos_full = p > 0 ? torch::cat({pos, torch::zeros({p, pos.size(1)}, pos.options())}, 0) : pos;
    auto h = norm_self_(x);
    x = x + self_attn_(h + pos_full, h + pos_full, h);
    if (p > 0) {
        auto img = x.narrow(0, 0, l);
        auto pr = x.narrow(0, l, p);
        auto kv = norm_cross_kv_(img);
        pr = pr + cross_attn_(norm_cross_q_(pr), kv + pos, kv);
        x = torch::cat({img, pr}, 0);
    }
    return x + ffn_(norm_ffn_(x));
}

PixelDecoderImpl::PixelDecoderImpl(int width) {
    up1_ = register_module("up1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(width, width, 2).stride(2)));
    norm_ = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(group_count(width), width)));
    up2_ = register_module("up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(width, width, 2).stride(2)));
    torch::NoGradGuard no_grad;
    up1_->bias.zero_();
    up2_->bias.zero_();
}

MaskFeature PixelDecoderImpl::forward(const BlendedFeature& feature) {
    auto x = feature.grid.unsqueeze(0);
    x = F::gelu(norm_(up1_(x)));
    return {up2_(x).squeeze(0)};
}

DecoderBlockImpl::DecoderBlockImpl(int width, int heads, int ffn_dim) {
    norm_cross_ = register_module("norm_cross", nn::LayerNorm(nn::LayerNormOptions({width})));
    norm_self_ = register_module("norm_self", nn::LayerNorm(nn::LayerNormOptions({width})));
    norm_ffn_ = register_module("norm_ffn", nn::LayerNorm(nn::LayerNormOptions({width})));
    cross_attn_ = register_module("cross_attn", MultiHeadAttention(width, heads));
    self_attn_ = register_module("self_attn", MultiHeadAttention(width, heads));
    ffn_ = register_module("ffn", FeedForward(width, ffn_dim));
}

Tensor DecoderBlockImpl::forward(const Tensor& sequence, const Tensor& memory, const Tensor& pos) {
    auto s = sequence + cross_attn_(norm_cross_(sequence), memory + pos, memory);
    auto h = norm_self_(s);
    s = s + self_attn_(h, h, h);
    return s + ffn_(norm_ffn_(s));
}

MaskMlpImpl::MaskMlpImpl(int width, int depth) {
    for (int i = 0; i < depth; ++i)
        layers_.push_back(register_module("fc" + std::to_string(i), make_linear(width, width)));
}

Tensor MaskMlpImpl::forward(const Tensor& x) {
    auto h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (i + 1 < layers_.size()) h = F::gelu(h);
    }
    return h;
}

SegDecoderImpl::SegDecoderImpl(const SegDecoderConfig& config, int image_channels, int visual_dim, int text_dim)
    : config_(config) {
    config_.validate();
    const int c = config_.width;
    blender_ = register_module("blender", FeatureBlender(image_channels, c));
    visual_adapter_ = register_module("visual_adapter", PromptAdapter(visual_dim, c));
    text_adapter_ = register_module("text_adapter", PromptAdapter(text_dim, c));
    for (int i = 0; i < config_.aligner_blocks; ++i)
        aligner_.push_back(register_module("aligner" + std::to_string(i), AlignerBlock(c, config_.heads, config_.ffn_dim)));
    aligner_norm_ = register_module("aligner_norm", nn::LayerNorm(nn::LayerNormOptions({c})));
    pixel_decoder_ = register_module("pixel_decoder", PixelDecoder(c));
    for (int i = 0; i < config_.decoder_blocks; ++i)
        decoder_.push_back(register_module("decoder" + std::to_string(i), DecoderBlock(c, config_.heads, config_.ffn_dim)));
    decoder_norm_ = register_module("decoder_norm", nn::LayerNorm(nn::LayerNormOptions({c})));
    mask_mlp_ = register_module("mask_mlp", MaskMlp(c, config_.mask_mlp_depth));
    queries_ = register_parameter("queries", torch::randn({config_.num_queries, c}));
    no_object_ = register_parameter("no_object", torch::randn({c}));
    log_temperature_ = register_parameter("log_temperature", torch::full({1}, std::log(config_.init_temperature)));
}

torch::Dtype SegDecoderImpl::dtype() const { return queries_.scalar_type(); }

Tensor SegDecoderImpl::to_dtype(const Tensor& t) const { return t.to(dtype()); }

BlendedFeature SegDecoderImpl::blend(const ImageFeatureSet& features) { return blender_(features); }

Tensor SegDecoderImpl::adapt_visual(const PromptTokens& tokens) { return visual_adapter_(tokens.embeddings); }

Tensor SegDecoderImpl::adapt_text(const PromptTokens& tokens) { return text_adapter_(tokens.embeddings); }

AlignedState SegDecoderImpl::align(const BlendedFeature& feature, const Tensor& visual, const Tensor& text) {
    const auto c = feature.grid.size(0), h = feature.grid.size(1), w = feature.grid.size(2);
    if (c != config_.width) throw ShapeError("align: image width differs from model width");
    if (visual.size(1) != c || text.size(1) != c) throw ShapeError("align: prompt width differs from model width");
    const auto m = visual.size(0), n = text.size(0), l = h * w;
    auto pos = sine_position_encoding(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), dtype());
    auto image = feature.grid.reshape({c, l}).t();
    auto prompts = torch::cat({visual, text}, 0);
    auto x = torch::cat({image, prompts}, 0);
    for (auto& block : aligner_) x = block(x.narrow(0, 0, l), x.narrow(0, l, m + n), pos);
    x = aligner_norm_(x);
    AlignedState out;
    out.image = x.narrow(0, 0, l).t().reshape({c, h, w});
    out.visual = x.narrow(0, l, m);
    out.text = x.narrow(0, l + m, n);
    return out;
}

MaskFeature SegDecoderImpl::pixel_decode(const BlendedFeature& feature) { return pixel_decoder_(feature); }

std::vector<DecodedState> SegDecoderImpl::decode(const AlignedState& state) {
    const auto c = state.image.size(0), h = state.image.size(1), w = state.image.size(2);
    if (c != config_.width || state.visual.size(1) != c || state.text.size(1) != c)
        throw ShapeError("decode: widths differ from model width");
    const auto k = queries_.size(0), m = state.visual.size(0), n = state.text.size(0);
    auto pos = sine_position_encoding(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), dtype());
    auto memory = state.image.reshape({c, h * w}).t();
    auto seq = torch::cat({queries_, state.visual, state.text}, 0);
    std::vector<DecodedState> out;
    out.reserve(decoder_.size());
    for (auto& block : decoder_) {
        seq = block(seq, memory, pos);
        auto normed = decoder_norm_(seq);
        out.push_back({normed.narrow(0, 0, k), normed.narrow(0, k, m), normed.narrow(0, k + m, n)});
    }
    return out;
}

HeadOutput SegDecoderImpl::heads(const DecodedState& state, const MaskFeature& mask_feature,
                                 const std::vector<int>& column_class_ids) {
    HeadOutput out;
    out.scores = compute_scores(state, no_object_, temperature(), column_class_ids);
    out.masks.logits = project_masks(mask_mlp_(state.queries), mask_feature);
    return out;
}

ForwardOutput SegDecoderImpl::forward(const ImageFeatureSet& features, const PromptTokens& visual,
                                      const PromptTokens& text, bool fuse) {
    ForwardOutput result;
    auto blended = blend(features);
    auto v = adapt_visual(visual);
    auto t = adapt_text(text);
    std::vector<int> ids;
    if (fuse && !visual.empty() && !text.empty()) {
        PromptTokens av{v, visual.class_ids, Modality::Visual, {}};
        PromptTokens at{t, text.class_ids, Modality::Text, {}};
        auto fused = fuse_prompts(av, at);
        v = fused.embeddings;
        t = torch::zeros({0, config_.width}, v.options());
        ids = fused.class_ids;
        result.prompt_mode = Modality::Fused;
    } else {
        ids = visual.class_ids;
        ids.insert(ids.end(), text.class_ids.begin(), text.class_ids.end());
        result.prompt_mode = visual.empty() && !text.empty() ? Modality::Text : Modality::Visual;
    }
    auto aligned = align(blended, v, t);
    auto mask_feature = pixel_decode(blended);
    auto states = decode(aligned);
    for (std::size_t i = 0; i + 1 < states.size(); ++i) result.aux.push_back(heads(states[i], mask_feature, ids));
    result.final = heads(states.back(), mask_feature, ids);
    return result;
}

SegModel::SegModel(const PoolConfig& pool, const SegDecoderConfig& decoder, torch::Dtype dtype, std::uint64_t seed)
    : pool_config_(pool), pool_(pool), dtype_(dtype) {
    torch::manual_seed(seed);
    decoder_ = SegDecoder(decoder, pool_.total_image_channels(), pool_.visual_dim(), pool_.text_dim());
    decoder_->to(dtype);
}

ForwardOutput SegModel::forward(const Tensor& image, const PromptTokens& visual, const PromptTokens& text, bool fuse) {
    return forward(pool_.encode_image(image), visual, text, fuse);
}

ForwardOutput SegModel::forward(const ImageFeatureSet& features, const PromptTokens& visual, const PromptTokens& text,
                                bool fuse) {
    return decoder_->forward(features, visual, text, fuse);
}

PromptTokens SegModel::no_visual() const { return PromptTokens::empty_of(Modality::Visual, pool_.visual_dim()); }

PromptTokens SegModel::no_text() const { return PromptTokens::empty_of(Modality::Text, pool_.text_dim()); }

void SegModel::check_finite() const {
    for (const auto& p : decoder_->parameters()) {
        if (!torch::isfinite(p).all().item<bool>()) throw ModelStateError("model has non-finite parameters");
    }
}

}  // namespace openseg
