#include "openseg/model_pool.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <ATen/CPUGeneratorImpl.h>

#include "openseg/errors.hpp"
#include "openseg/rng.hpp"

namespace openseg {

namespace F = torch::nn::functional;

const char* to_string(Modality m) {
    switch (m) {
        case Modality::Visual: return "visual";
        case Modality::Text: return "text";
        case Modality::Fused: return "fused";
    }
    return "?";
}

int ImageFeatureSet::height() const { return features.empty() ? 0 : static_cast<int>(features.front().size(1)); }
int ImageFeatureSet::width() const { return features.empty() ? 0 : static_cast<int>(features.front().size(2)); }
int ImageFeatureSet::total_channels() const {
    int c = 0;
    for (const auto& f : features) c += static_cast<int>(f.size(0));
    return c;
}

int PromptTokens::width() const { return embeddings.defined() ? static_cast<int>(embeddings.size(1)) : 0; }

PromptTokens PromptTokens::empty_of(Modality modality, int width, torch::Dtype dtype) {
    PromptTokens t;
    t.embeddings = torch::zeros({0, width}, torch::TensorOptions().dtype(dtype));
    t.modality = modality;
    return t;
}

PromptTokens PromptTokens::concat(const std::vector<PromptTokens>& parts) {
    if (parts.empty()) throw ValidationError("PromptTokens::concat: no parts");
    PromptTokens out;
    out.modality = parts.front().modality;
    std::vector<Tensor> rows;
    bool any_instance = false;
    for (const auto& p : parts) any_instance = any_instance || !p.instance_ids.empty();
    for (const auto& p : parts) {
        if (p.modality != out.modality) throw ValidationError("PromptTokens::concat: mixed modalities");
        if (p.width() != parts.front().width())
            throw ShapeError("PromptTokens::concat: width mismatch");
        rows.push_back(p.embeddings);
        out.class_ids.insert(out.class_ids.end(), p.class_ids.begin(), p.class_ids.end());
        if (any_instance) {
            if (p.instance_ids.empty())
                out.instance_ids.insert(out.instance_ids.end(), p.class_ids.size(), -1);
            else
                out.instance_ids.insert(out.instance_ids.end(), p.instance_ids.begin(), p.instance_ids.end());
        }
    }
    out.embeddings = torch::cat(rows, 0);
    return out;
}

void PromptTokens::validate() const {
    if (!embeddings.defined() || embeddings.dim() != 2)
        throw ShapeError("PromptTokens: embeddings must be a 2-D matrix");
    if (embeddings.size(0) != static_cast<std::int64_t>(class_ids.size()))
        throw ValidationError("PromptTokens: row count differs from class_ids");
    if (!instance_ids.empty() && instance_ids.size() != class_ids.size())
        throw ValidationError("PromptTokens: instance_ids length differs from class_ids");
    if (embeddings.numel() > 0 && !torch::isfinite(embeddings).all().item<bool>())
        throw ValidationError("PromptTokens: non-finite embedding");
}

ClassVocabulary::ClassVocabulary(std::vector<std::string> n, std::vector<bool> stuff)
    : names(std::move(n)), stuff_flags(std::move(stuff)) {
    if (stuff_flags.empty()) stuff_flags.assign(names.size(), false);
    if (stuff_flags.size() != names.size())
        throw VocabularyError("vocabulary: stuff_flags length differs from names");
    std::set<std::string> seen;
    for (const auto& name : names) {
        if (!seen.insert(name).second) throw VocabularyError("vocabulary: duplicate class name '" + name + "'");
    }
}

int ClassVocabulary::id_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw VocabularyError("unknown class name '" + name + "'");
    return static_cast<int>(it - names.begin());
}

bool ClassVocabulary::is_stuff(int class_id) const {
    if (class_id < 0 || class_id >= size()) return false;
    return stuff_flags[static_cast<std::size_t>(class_id)];
}

namespace {

Tensor seeded_normal(std::vector<std::int64_t> shape, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64));
}

void check_image(const Tensor& image) {
    if (!image.defined() || image.dim() != 3 || image.size(0) != 3)
        throw ShapeError("image must be a 3 x H x W tensor");
    if (!torch::isfinite(image).all().item<bool>()) throw ValidationError("image contains non-finite pixels");
    if (image.numel() > 0 && (image.min().item<double>() < 0.0 || image.max().item<double>() > 1.0))
        throw ValidationError("image values must lie in [0, 1]");
}

}  // namespace

StubPatchEncoder::StubPatchEncoder(EncoderSpec spec) : spec_(std::move(spec)) {
    if (spec_.stride < 1) throw ConfigError("encoder '" + spec_.name + "': stride must be positive");
    if (spec_.out_dim < 1) throw ConfigError("encoder '" + spec_.name + "': out_dim must be positive");
    const std::int64_t fan_in = 3LL * spec_.stride * spec_.stride;
    projection_ = (seeded_normal({spec_.out_dim, fan_in}, spec_.seed) / std::sqrt(static_cast<double>(fan_in)))
                      .to(torch::kFloat32);
}

Tensor StubPatchEncoder::encode(const Tensor& image) const {
    const auto s = spec_.stride;
    const auto h = image.size(1), w = image.size(2);
    if (h % s != 0 || w % s != 0)
        throw ShapeError("image side " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by stride " + std::to_string(s) + " of encoder '" + spec_.name + "'");
    const auto gh = h / s, gw = w / s;
    // 3 x gh x s x gw x s -> (gh*gw) x (3*s*s)
    auto patches = image.to(torch::kFloat32)
                       .reshape({3, gh, s, gw, s})
                       .permute({1, 3, 0, 2, 4})
                       .reshape({gh * gw, 3 * s * s});
    return patches.matmul(projection_.t()).t().reshape({spec_.out_dim, gh, gw}).contiguous();
}

StubTextEncoder::StubTextEncoder(int width, std::uint64_t seed) : width_(width), seed_(seed) {
    if (width < 1) throw ConfigError("text encoder width must be positive");
}

Tensor StubTextEncoder::embed(const std::string& class_name) const {
    const std::uint64_t key = splitmix64(seed_ ^ fnv1a(class_name));
    return seeded_normal({width_}, key).to(torch::kFloat32);
}

Tensor downsample_mask(const Tensor& mask, int stride) {
    if (mask.dim() != 2) throw ShapeError("mask must be a 2-D grid");
    if (mask.size(0) % stride != 0 || mask.size(1) % stride != 0)
        throw ShapeError("mask side not divisible by stride " + std::to_string(stride));
    auto m = (mask.to(torch::kFloat64) > 0.5).to(torch::kFloat64);
    if (m.sum().item<double>() <= 0.0) throw EmptyMaskError("mask has no foreground pixel");
    if (stride == 1) return m;
    auto area = F::avg_pool2d(m.unsqueeze(0).unsqueeze(0), F::AvgPool2dFuncOptions(stride).stride(stride))
                    .squeeze(0)
                    .squeeze(0);
    auto cells = (area >= 0.5).to(torch::kFloat64);
    if (cells.sum().item<double>() <= 0.0) {
        // argmax on the flattened grid picks the first maximal cell
        auto flat = torch::zeros({area.numel()}, area.options());
        flat[area.flatten().argmax().item<std::int64_t>()] = 1.0;
        cells = flat.reshape(area.sizes());
    }
    return cells;
}

Tensor mask_pool(const Tensor& features, const Tensor& cell_mask) {
    if (features.dim() != 3) throw ShapeError("mask_pool: features must be d x h x w");
    if (cell_mask.dim() != 2 || cell_mask.size(0) != features.size(1) || cell_mask.size(1) != features.size(2))
        throw ShapeError("mask_pool: mask shape differs from the feature grid");
    auto m = cell_mask.to(features.scalar_type());
    const double count = m.sum().item<double>();
    if (count <= 0.0) throw EmptyMaskError("mask_pool: empty mask");
    return (features * m.unsqueeze(0)).sum({1, 2}) / count;
}

namespace {

ImageFeatureSet encode_with(const Tensor& image, const std::vector<const ImageEncoder*>& encoders) {
    check_image(image);
    if (encoders.empty()) throw ConfigError("encoder pool is empty");
    int finest = encoders.front()->spec().stride;
    for (const auto* e : encoders) {
        const int s = e->spec().stride;
        if (image.size(1) % s != 0 || image.size(2) % s != 0)
            throw ShapeError("image side not divisible by stride " + std::to_string(s));
        finest = std::min(finest, s);
    }
    const std::int64_t gh = image.size(1) / finest, gw = image.size(2) / finest;
    ImageFeatureSet out;
    torch::NoGradGuard no_grad;
    for (const auto* e : encoders) {
        auto f = e->encode(image);
        if (f.size(1) != gh || f.size(2) != gw) {
            f = F::interpolate(f.unsqueeze(0), F::InterpolateFuncOptions()
                                                   .size(std::vector<std::int64_t>{gh, gw})
                                                   .mode(torch::kBilinear)
                                                   .align_corners(false))
                    .squeeze(0);
        }
        out.features.push_back(f.contiguous());
        out.source.push_back(e->spec());
    }
    return out;
}

PromptTokens pool_tokens(const Tensor& features, int stride, const std::vector<Tensor>& masks,
                         const std::vector<int>& class_ids, const std::vector<int>& instance_ids) {
    if (masks.size() != class_ids.size())
        throw ValidationError("visual prompts: " + std::to_string(masks.size()) + " masks but " +
                              std::to_string(class_ids.size()) + " class ids");
    if (!instance_ids.empty() && instance_ids.size() != class_ids.size())
        throw ValidationError("visual prompts: instance_ids length differs from class_ids");
    PromptTokens tokens;
    tokens.modality = Modality::Visual;
    tokens.class_ids = class_ids;
    tokens.instance_ids = instance_ids;
    if (masks.empty()) {
        tokens.embeddings = torch::zeros({0, features.size(0)}, features.options());
        return tokens;
    }
    std::vector<Tensor> rows;
    rows.reserve(masks.size());
    for (const auto& mask : masks) {
        if (mask.dim() != 2 || mask.size(0) != features.size(1) * stride || mask.size(1) != features.size(2) * stride)
            throw ShapeError("visual prompt mask does not match the example image size");
        rows.push_back(mask_pool(features, downsample_mask(mask, stride)));
    }
    tokens.embeddings = torch::stack(rows, 0).to(features.scalar_type());
    return tokens;
}

}  // namespace

ImageFeatureSet encode_image(const Tensor& image, const std::vector<EncoderSpec>& pool) {
    std::vector<StubPatchEncoder> encoders;
    encoders.reserve(pool.size());
    for (const auto& spec : pool) encoders.emplace_back(spec);
    std::vector<const ImageEncoder*> ptrs;
    for (const auto& e : encoders) ptrs.push_back(&e);
    return encode_with(image, ptrs);
}

PromptTokens encode_visual_prompts(const Tensor& example_image, const std::vector<Tensor>& masks,
                                   const std::vector<int>& class_ids, const EncoderSpec& encoder) {
    check_image(example_image);
    StubPatchEncoder enc(encoder);
    torch::NoGradGuard no_grad;
    return pool_tokens(enc.encode(example_image), encoder.stride, masks, class_ids, {});
}

PromptTokens encode_text_prompts(const std::vector<int>& class_ids, const ClassVocabulary& vocab,
                                 std::uint64_t seed, int width) {
    StubTextEncoder enc(width, seed);
    PromptTokens tokens;
    tokens.modality = Modality::Text;
    tokens.class_ids = class_ids;
    std::vector<Tensor> rows;
    for (int id : class_ids) {
        if (id < 0 || id >= vocab.size())
            throw VocabularyError("class id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(vocab.size()));
        rows.push_back(enc.embed(vocab.names[static_cast<std::size_t>(id)]));
    }
    tokens.embeddings = rows.empty() ? torch::zeros({0, width}) : torch::stack(rows, 0);
    return tokens;
}

PoolConfig PoolConfig::desk() {
    PoolConfig c;
    c.encoders = {EncoderSpec{"patch8", 8, 64, 1001}, EncoderSpec{"patch16", 16, 64, 2002}};
    c.prompt_encoder = "patch8";
    c.text_dim = 64;
    c.text_seed = 7;
    return c;
}

void PoolConfig::validate() const {
    if (encoders.empty()) throw ConfigError("pool: at least one encoder is required");
    std::set<std::string> names;
    for (const auto& e : encoders) {
        if (e.name.empty()) throw ConfigError("pool: encoder name must be nonempty");
        if (!names.insert(e.name).second) throw ConfigError("pool: duplicate encoder name '" + e.name + "'");
        if (e.stride < 1 || e.out_dim < 1) throw ConfigError("pool: encoder '" + e.name + "' needs positive stride and out_dim");
    }
    if (!names.count(prompt_encoder)) throw ConfigError("pool: prompt_encoder '" + prompt_encoder + "' is not in the pool");
    if (text_dim < 1) throw ConfigError("pool: text_dim must be positive");
}

ModelPool::ModelPool(const PoolConfig& config) {
    config.validate();
    for (std::size_t i = 0; i < config.encoders.size(); ++i) {
        encoders_.push_back(std::make_shared<StubPatchEncoder>(config.encoders[i]));
        if (config.encoders[i].name == config.prompt_encoder) prompt_index_ = i;
    }
    text_ = std::make_shared<StubTextEncoder>(config.text_dim, config.text_seed);
}

ModelPool::ModelPool(std::vector<std::shared_ptr<const ImageEncoder>> encoders, std::size_t prompt_encoder,
                     std::shared_ptr<const TextEncoder> text_encoder)
    : encoders_(std::move(encoders)), prompt_index_(prompt_encoder), text_(std::move(text_encoder)) {
    if (encoders_.empty()) throw ConfigError("pool: at least one encoder is required");
    if (prompt_index_ >= encoders_.size()) throw ConfigError("pool: prompt encoder index out of range");
    if (!text_) throw ConfigError("pool: text encoder is required");
}

ImageFeatureSet ModelPool::encode_image(const Tensor& image) const {
    std::vector<const ImageEncoder*> ptrs;
    for (const auto& e : encoders_) ptrs.push_back(e.get());
    return encode_with(image, ptrs);
}

Tensor ModelPool::prompt_features(const Tensor& image) const {
    check_image(image);
    torch::NoGradGuard no_grad;
    return prompt_encoder().encode(image);
}

PromptTokens ModelPool::encode_visual_prompts(const Tensor& example_image, const std::vector<Tensor>& masks,
                                              const std::vector<int>& class_ids,
                                              const std::vector<int>& instance_ids) const {
    return pool_visual_prompts(prompt_features(example_image), masks, class_ids, instance_ids);
}

PromptTokens ModelPool::pool_visual_prompts(const Tensor& features, const std::vector<Tensor>& masks,
                                            const std::vector<int>& class_ids,
                                            const std::vector<int>& instance_ids) const {
    torch::NoGradGuard no_grad;
    return pool_tokens(features, prompt_encoder().spec().stride, masks, class_ids, instance_ids);
}

PromptTokens ModelPool::encode_text_prompts(const std::vector<int>& class_ids, const ClassVocabulary& vocab) const {
    PromptTokens tokens;
    tokens.modality = Modality::Text;
    tokens.class_ids = class_ids;
    std::vector<Tensor> rows;
    for (int id : class_ids) {
        if (id < 0 || id >= vocab.size())
            throw VocabularyError("class id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(vocab.size()));
        rows.push_back(text_->embed(vocab.names[static_cast<std::size_t>(id)]));
    }
    tokens.embeddings = rows.empty() ? torch::zeros({0, text_->width()}) : torch::stack(rows, 0);
    return tokens;
}

int ModelPool::total_image_channels() const {
    int c = 0;
    for (const auto& e : encoders_) c += e->spec().out_dim;
    return c;
}

int ModelPool::finest_stride() const {
    int s = encoders_.front()->spec().stride;
    for (const auto& e : encoders_) s = std::min(s, e->spec().stride);
    return s;
}

std::uint64_t ModelPool::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : encoders_)
        for (const auto& p : e->frozen_parameters()) h = tensor_checksum(p, h);
    for (const auto& p : text_->frozen_parameters()) h = tensor_checksum(p, h);
    return h;
}

std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t h) {
    auto c = t.detach().contiguous().cpu();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = c.numel() * static_cast<std::int64_t>(c.element_size());
    for (std::int64_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace openseg
