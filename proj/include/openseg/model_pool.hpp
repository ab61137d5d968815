#pragma once

// Frozen encoders: image feature extraction and prompt-token extraction.
//
// Every encoder here is deterministic and has no trainable state. The stub
// encoders stand in for large pretrained backbones; anything implementing
// ImageEncoder / TextEncoder can be dropped into a ModelPool instead.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace openseg {

using torch::Tensor;

struct EncoderSpec {
    std::string name;
    int stride = 8;
    int out_dim = 64;
    std::uint64_t seed = 0;

    bool operator==(const EncoderSpec&) const = default;
};

enum class Modality { Visual, Text, Fused };

const char* to_string(Modality m);

/// P feature grids resampled to one common H x W.
struct ImageFeatureSet {
    std::vector<Tensor> features;  // each out_dim_i x H x W
    std::vector<EncoderSpec> source;

    int height() const;
    int width() const;
    int total_channels() const;
};

/// One prompt sequence of a single modality. Rows of `embeddings` are tokens.
struct PromptTokens {
    Tensor embeddings;  // rows x d
    std::vector<int> class_ids;
    Modality modality = Modality::Visual;
    std::vector<int> instance_ids;  // optional; empty or one per row

    int size() const { return static_cast<int>(class_ids.size()); }
    bool empty() const { return class_ids.empty(); }
    int width() const;

    static PromptTokens empty_of(Modality modality, int width,
                                 torch::Dtype dtype = torch::kFloat32);
    /// Row-wise concatenation; all parts must share modality and width.
    static PromptTokens concat(const std::vector<PromptTokens>& parts);
    /// Throws ValidationError if rows, ids or values are inconsistent.
    void validate() const;
};

struct ClassVocabulary {
    std::vector<std::string> names;
    std::vector<bool> stuff_flags;

    ClassVocabulary() = default;
    explicit ClassVocabulary(std::vector<std::string> names,
                             std::vector<bool> stuff_flags = {});

    int size() const { return static_cast<int>(names.size()); }
    int id_of(const std::string& name) const;  // throws VocabularyError
    bool is_stuff(int class_id) const;
};

class ImageEncoder {
public:
    virtual ~ImageEncoder() = default;
    virtual const EncoderSpec& spec() const = 0;
    /// 3 x H x W image in [0,1] -> out_dim x H/stride x W/stride.
    virtual Tensor encode(const Tensor& image) const = 0;
    /// Frozen weights, exposed for checksumming.
    virtual std::vector<Tensor> frozen_parameters() const = 0;
};

/// Non-overlapping patch flattening followed by a seeded random linear map.
class StubPatchEncoder final : public ImageEncoder {
public:
    explicit StubPatchEncoder(EncoderSpec spec);

    const EncoderSpec& spec() const override { return spec_; }
    Tensor encode(const Tensor& image) const override;
    std::vector<Tensor> frozen_parameters() const override { return {projection_}; }

    const Tensor& projection() const { return projection_; }

private:
    EncoderSpec spec_;
    Tensor projection_;  // out_dim x (3 * stride * stride), no bias
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int width() const = 0;
    virtual Tensor embed(const std::string& class_name) const = 0;  // width
    virtual std::vector<Tensor> frozen_parameters() const = 0;
};

/// Frozen embedding table keyed by class name. Rows depend on (seed, name)
/// only, so a name keeps its embedding regardless of vocabulary order.
class StubTextEncoder final : public TextEncoder {
public:
    StubTextEncoder(int width, std::uint64_t seed);

    int width() const override { return width_; }
    Tensor embed(const std::string& class_name) const override;
    std::vector<Tensor> frozen_parameters() const override { return {}; }
    std::uint64_t seed() const { return seed_; }

private:
    int width_;
    std::uint64_t seed_;
};

/// Area-average a binary H x W mask down by `stride`, threshold at 0.5 and
/// fall back to the argmax cell when thresholding empties it.
/// Throws EmptyMaskError for an all-background mask.
Tensor downsample_mask(const Tensor& mask, int stride);

/// Mean of the feature vectors (d x h x w) over the foreground cells of a
/// binary h x w mask. Returns a d-vector.
Tensor mask_pool(const Tensor& features, const Tensor& cell_mask);

/// Encode with every configured stub encoder and resample to the finest grid.
ImageFeatureSet encode_image(const Tensor& image, const std::vector<EncoderSpec>& pool);

PromptTokens encode_visual_prompts(const Tensor& example_image, const std::vector<Tensor>& masks,
                                   const std::vector<int>& class_ids, const EncoderSpec& encoder);

PromptTokens encode_text_prompts(const std::vector<int>& class_ids, const ClassVocabulary& vocab,
                                 std::uint64_t seed, int width = 64);

struct PoolConfig {
    std::vector<EncoderSpec> encoders;
    std::string prompt_encoder;  // name of the visual-prompt encoder
    int text_dim = 64;
    std::uint64_t text_seed = 7;

    static PoolConfig desk();
    void validate() const;
};

/// The frozen half of the model.
class ModelPool {
public:
    ModelPool() = default;
    explicit ModelPool(const PoolConfig& config);
    ModelPool(std::vector<std::shared_ptr<const ImageEncoder>> encoders, std::size_t prompt_encoder,
              std::shared_ptr<const TextEncoder> text_encoder);

    ImageFeatureSet encode_image(const Tensor& image) const;

    /// Designated-encoder feature map of an image, at its native stride.
    Tensor prompt_features(const Tensor& image) const;

    PromptTokens encode_visual_prompts(const Tensor& example_image, const std::vector<Tensor>& masks,
                                       const std::vector<int>& class_ids,
                                       const std::vector<int>& instance_ids = {}) const;
    /// Pools tokens from an already-computed prompt_features() map.
    PromptTokens pool_visual_prompts(const Tensor& features, const std::vector<Tensor>& masks,
                                     const std::vector<int>& class_ids,
                                     const std::vector<int>& instance_ids = {}) const;

    PromptTokens encode_text_prompts(const std::vector<int>& class_ids, const ClassVocabulary& vocab) const;

    const ImageEncoder& prompt_encoder() const { return *encoders_.at(prompt_index_); }
    const TextEncoder& text_encoder() const { return *text_; }
    const std::vector<std::shared_ptr<const ImageEncoder>>& encoders() const { return encoders_; }
    int total_image_channels() const;
    int visual_dim() const { return prompt_encoder().spec().out_dim; }
    int text_dim() const { return text_->width(); }
    /// Smallest stride in the pool; the common feature grid is image / finest_stride.
    int finest_stride() const;

    /// Deterministic checksum over every frozen parameter.
    std::uint64_t checksum() const;

private:
    std::vector<std::shared_ptr<const ImageEncoder>> encoders_;
    std::size_t prompt_index_ = 0;
    std::shared_ptr<const TextEncoder> text_;
};

/// FNV-1a over the raw bytes of a contiguous tensor, chained from `h`.
std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace openseg
