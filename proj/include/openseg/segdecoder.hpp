#pragma once

// The trainable decoder: feature blender, prompt adapters, image-prompt
// aligner, pixel decoder, multi-modality decoder and the score / mask heads.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "openseg/model_pool.hpp"

namespace openseg {

struct SegDecoderConfig {
    int width = 64;          // C
    int num_queries = 20;    // K
    int aligner_blocks = 1;
    int decoder_blocks = 6;
    int heads = 4;
    int ffn_dim = 256;
    int mask_mlp_depth = 3;
    double init_temperature = 10.0;

    static SegDecoderConfig paper();
    static SegDecoderConfig desk();
    void validate() const;
};

struct BlendedFeature {
    Tensor grid;  // C x H x W
};

struct AlignedState {
    Tensor image;   // C x H x W
    Tensor visual;  // M x C
    Tensor text;    // N x C
};

struct MaskFeature {
    Tensor grid;  // C x 4H x 4W
};

struct DecodedState {
    Tensor queries;  // K x C
    Tensor visual;   // M x C
    Tensor text;     // N x C
};

/// K x (M + N + 1) logits; the last column is no-object.
struct ScoreMatrix {
    Tensor logits;
    std::vector<int> column_class_ids;  // one per prompt column

    int prompt_columns() const { return static_cast<int>(column_class_ids.size()); }
    int no_object_column() const { return prompt_columns(); }
};

struct MaskLogits {
    Tensor logits;  // K x H' x W'
};

struct HeadOutput {
    ScoreMatrix scores;
    MaskLogits masks;
};

struct ForwardOutput {
    HeadOutput final;
    std::vector<HeadOutput> aux;  // one per decoder block before the last
    Modality prompt_mode = Modality::Visual;
};

/// DETR-style normalized 2-D sine embedding, (H*W) x C with C divisible by 4.
Tensor sine_position_encoding(int channels, int height, int width, torch::Dtype dtype = torch::kFloat32);

/// tau * normalize(queries) . normalize([visual; text; no_object])^T
ScoreMatrix compute_scores(const DecodedState& state, const Tensor& no_object, const Tensor& temperature,
                           std::vector<int> column_class_ids);

/// Inner product of K x C embeddings with every cell of the mask feature.
Tensor project_masks(const Tensor& embeddings, const MaskFeature& mask_feature);

class MultiHeadAttentionImpl : public torch::nn::Module {
public:
    MultiHeadAttentionImpl(int width, int heads);
    Tensor forward(const Tensor& query, const Tensor& key, const Tensor& value);

private:
    int heads_;
    torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
public:
    FeedForwardImpl(int width, int hidden);
    Tensor forward(const Tensor& x);

private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

class FeatureBlenderImpl : public torch::nn::Module {
public:
    FeatureBlenderImpl(int in_channels, int width);
    BlendedFeature forward(const ImageFeatureSet& features);
    int in_channels() const { return in_channels_; }

private:
    int in_channels_;
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(FeatureBlender);

/// Affine projection from encoder width to C followed by layer norm.
class PromptAdapterImpl : public torch::nn::Module {
public:
    PromptAdapterImpl(int in_dim, int width);
    Tensor forward(const Tensor& tokens);
    torch::nn::Linear& projection() { return proj_; }

private:
    int in_dim_;
    torch::nn::Linear proj_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(PromptAdapter);

/// Self-attention over [image; prompts], prompt-to-image cross-attention, shared FFN.
class AlignerBlockImpl : public torch::nn::Module {
public:
    AlignerBlockImpl(int width, int heads, int ffn_dim);
    /// image: L x C, prompts: P x C, pos: L x C. Returns the updated [image; prompts].
    Tensor forward(const Tensor& image, const Tensor& prompts, const Tensor& pos);

private:
    torch::nn::LayerNorm norm_self_{nullptr}, norm_cross_q_{nullptr}, norm_cross_kv_{nullptr}, norm_ffn_{nullptr};
    MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
    FeedForward ffn_{nullptr};
};
TORCH_MODULE(AlignerBlock);

class PixelDecoderImpl : public torch::nn::Module {
public:
    explicit PixelDecoderImpl(int width);
    MaskFeature forward(const BlendedFeature& feature);

private:
    torch::nn::ConvTranspose2d up1_{nullptr}, up2_{nullptr};
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(PixelDecoder);

/// Cross-attention of [queries; prompts] to image tokens, self-attention, FFN.
class DecoderBlockImpl : public torch::nn::Module {
public:
    DecoderBlockImpl(int width, int heads, int ffn_dim);
    /// sequence: (K + P) x C, memory: L x C, pos: L x C.
    Tensor forward(const Tensor& sequence, const Tensor& memory, const Tensor& pos);

private:
    torch::nn::LayerNorm norm_cross_{nullptr}, norm_self_{nullptr}, norm_ffn_{nullptr};
    MultiHeadAttention cross_attn_{nullptr}, self_attn_{nullptr};
    FeedForward ffn_{nullptr};
};
TORCH_MODULE(DecoderBlock);

class MaskMlpImpl : public torch::nn::Module {
public:
    MaskMlpImpl(int width, int depth);
    Tensor forward(const Tensor& x);

private:
    std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(MaskMlp);

class SegDecoderImpl : public torch::nn::Module {
public:
    SegDecoderImpl(const SegDecoderConfig& config, int image_channels, int visual_dim, int text_dim);

    const SegDecoderConfig& config() const { return config_; }

    BlendedFeature blend(const ImageFeatureSet& features);
    Tensor adapt_visual(const PromptTokens& tokens);
    Tensor adapt_text(const PromptTokens& tokens);
    AlignedState align(const BlendedFeature& feature, const Tensor& visual, const Tensor& text);
    MaskFeature pixel_decode(const BlendedFeature& feature);
    /// One normalized DecodedState per decoder block; the last one is final.
    std::vector<DecodedState> decode(const AlignedState& state);
    HeadOutput heads(const DecodedState& state, const MaskFeature& mask_feature,
                     const std::vector<int>& column_class_ids);

    /// Full decoder pass. When `fuse` is set and both modalities are present,
    /// adapted tokens of shared classes are averaged before alignment.
    ForwardOutput forward(const ImageFeatureSet& features, const PromptTokens& visual, const PromptTokens& text,
                          bool fuse = true);

    Tensor query_embeddings() const { return queries_; }
    Tensor no_object_embedding() const { return no_object_; }
    Tensor temperature() const { return log_temperature_.exp(); }
    torch::Dtype dtype() const;

    FeatureBlender& blender() { return blender_; }
    PromptAdapter& visual_adapter() { return visual_adapter_; }
    PromptAdapter& text_adapter() { return text_adapter_; }
    PixelDecoder& pixel_decoder() { return pixel_decoder_; }
    MaskMlp& mask_mlp() { return mask_mlp_; }

private:
    Tensor to_dtype(const Tensor& t) const;

    SegDecoderConfig config_;
    FeatureBlender blender_{nullptr};
    PromptAdapter visual_adapter_{nullptr}, text_adapter_{nullptr};
    std::vector<AlignerBlock> aligner_;
    torch::nn::LayerNorm aligner_norm_{nullptr};
    PixelDecoder pixel_decoder_{nullptr};
    std::vector<DecoderBlock> decoder_;
    torch::nn::LayerNorm decoder_norm_{nullptr};
    MaskMlp mask_mlp_{nullptr};
    Tensor queries_, no_object_, log_temperature_;
};
TORCH_MODULE(SegDecoder);

/// Frozen pool plus trainable decoder.
class SegModel {
public:
    SegModel(const PoolConfig& pool, const SegDecoderConfig& decoder, torch::Dtype dtype = torch::kFloat32,
             std::uint64_t seed = 0);

    ForwardOutput forward(const Tensor& image, const PromptTokens& visual, const PromptTokens& text,
                          bool fuse = true);
    ForwardOutput forward(const ImageFeatureSet& features, const PromptTokens& visual, const PromptTokens& text,
                          bool fuse = true);

    ModelPool& pool() { return pool_; }
    const ModelPool& pool() const { return pool_; }
    SegDecoder& decoder() { return decoder_; }
    const SegDecoder& decoder() const { return decoder_; }
    const PoolConfig& pool_config() const { return pool_config_; }
    torch::Dtype dtype() const { return dtype_; }

    /// Empty prompt sets of the right widths, for single-modality calls.
    PromptTokens no_visual() const;
    PromptTokens no_text() const;

    /// Throws ModelStateError when any decoder parameter is non-finite.
    void check_finite() const;

private:
    PoolConfig pool_config_;
    ModelPool pool_;
    SegDecoder decoder_{nullptr};
    torch::Dtype dtype_;
};

}  // namespace openseg
