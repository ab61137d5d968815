#pragma once

// Deterministic synthetic-shapes scenes: generation, on-disk format, loading
// and geometric augmentation.
//
// Directory layout:
//   images/NNNNN.png        RGB image
//   masks/NNNNN_k.png       8-bit 0/255 mask of instance k
//   annotations.json        image id -> split, file, instances {mask, class, instance_id}
//   vocab.txt               one class name per line, line number = class id

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "openseg/model_pool.hpp"
#include "openseg/rng.hpp"

namespace openseg {

enum class ShapeKind { Circle, Square, Triangle, Star, Cross, Ring };

ShapeKind shape_kind_from_name(const std::string& name);  // throws ConfigError
const std::vector<std::string>& all_shape_names();

struct SceneSpec {
    int image_size = 128;
    int min_instances = 1;
    int max_instances = 3;
    std::vector<std::string> shape_classes{"circle", "square", "triangle"};
    std::vector<std::array<std::uint8_t, 3>> palette{
        {230, 60, 60}, {60, 200, 80}, {70, 110, 235}, {235, 200, 50}, {200, 80, 220}, {60, 210, 220}};
    double background_noise = 0.08;
    bool overlap_allowed = false;
    std::uint64_t seed = 0;
    int min_size = 24;   // shape diameter range in pixels
    int max_size = 48;
    bool rotate = false;

    void validate() const;
    ClassVocabulary vocabulary() const;
};

struct Sample {
    Tensor image;   // 3 x S x S float in [0, 1]
    Tensor masks;   // n x S x S uint8 in {0, 1}
    std::vector<int> class_ids;
    std::vector<int> instance_ids;
    int image_id = 0;

    int num_instances() const { return static_cast<int>(class_ids.size()); }
    int height() const { return static_cast<int>(image.size(1)); }
    int width() const { return static_cast<int>(image.size(2)); }
    /// Class-id label map; background is kNoClass.
    Tensor semantic() const;
    /// Distinct class ids present, ascending.
    std::vector<int> classes() const;
    /// Instances of one class as a list of H x W masks.
    std::vector<Tensor> masks_of(int class_id) const;
};

struct Dataset {
    ClassVocabulary vocab;
    std::vector<Sample> samples;
    std::vector<int> train;  // indices into samples
    std::vector<int> val;

    std::vector<int> hosts_of(int class_id, const std::vector<int>& split) const;
};

/// Scene `index` of the dataset described by `spec`, rendered in memory.
/// `skipped` receives the number of instances that could not be placed.
Sample render_scene(const SceneSpec& spec, int index, int* skipped = nullptr);

/// Binary mask of one shape on an S x S canvas.
Tensor render_shape(ShapeKind kind, double cx, double cy, double radius, double angle, int size);

struct GenerateReport {
    int images = 0;
    int instances = 0;
    int skipped = 0;
    std::map<std::string, int> per_class;
    int train = 0;
    int val = 0;
};

/// Indices of the validation split: the `n_val` indices with the smallest index hash.
std::vector<int> validation_indices(int n_images, int n_val);

/// Writes the dataset directory. `n_val < 0` selects round(0.1 * n_images).
GenerateReport generate_dataset(const SceneSpec& spec, int n_images, const std::filesystem::path& out, int n_val = -1);

/// Generates in memory with exactly the content generate_dataset would write.
Dataset generate_in_memory(const SceneSpec& spec, int n_images, int n_val = -1);

Dataset load_dataset(const std::filesystem::path& path);

struct AugmentConfig {
    double flip_probability = 0.5;
    double scale_lo = 1.0;
    double scale_hi = 1.0;
    int crop_size = 128;
    int min_visible_area = 10;
};

Sample flip_horizontal(const Sample& sample);
/// Resize by `scale` (nearest), then crop a crop_size window at (top, left),
/// zero-padding past the border; instances below min_visible_area are dropped.
Sample scale_and_crop(const Sample& sample, double scale, int top, int left, int crop_size, int min_visible_area = 10);
Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& config);

struct SyntheticVideo {
    std::vector<Tensor> frames;               // 3 x S x S each
    std::vector<Tensor> masks;                // per frame: n x S x S uint8
    std::vector<int> object_ids;              // one per object
    std::vector<int> class_ids;               // one per object
};

/// Shapes translating at constant velocity (at most `max_speed` px per frame)
/// without leaving the canvas or overlapping.
SyntheticVideo generate_video(const SceneSpec& spec, int n_frames, double max_speed, std::uint64_t seed);

}  // namespace openseg
