#pragma once

// Prediction from text, visual or fused prompts, post-processing into
// instance / semantic / panoptic outputs, few-shot prompts and video
// propagation with a memory bank.

#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "openseg/fusion.hpp"
#include "openseg/metrics.hpp"
#include "openseg/segdecoder.hpp"

namespace openseg {

struct Thresholds {
    double score = 0.5;    // minimum class probability of an emitted query
    double mask = 0.5;     // sigmoid threshold of mask pixels
    double overlap = 0.8;  // minimum visible fraction of a pasted panoptic segment

    void validate() const;
};

/// Prompts of one prediction. Raw encoder tokens; fusion happens inside the
/// decoder after the adapters, so there is no separate fused field.
struct PromptBundle {
    std::optional<PromptTokens> visual;
    std::optional<PromptTokens> text;

    bool has_visual() const { return visual && !visual->empty(); }
    bool has_text() const { return text && !text->empty(); }
    Modality mode() const;
    void validate() const;
};

struct InstancePrediction {
    Tensor mask;             // H x W bool, input resolution
    int class_id = 0;
    double confidence = 0.0; // class probability x mean mask probability inside the mask
    double class_score = 0.0;
    int query = -1;
    int instance_id = -1;    // instance id of the best-scoring prompt column, if known
};

struct PanopticSegment {
    int id = 0;
    int class_id = 0;
    bool is_thing = true;
};

struct SegmentationResult {
    std::vector<InstancePrediction> instances;
    Tensor semantic;   // H x W int64, kNoClass where void
    Tensor panoptic;   // H x W int64 segment ids, 0 where void
    std::vector<PanopticSegment> segments;
    Modality mode = Modality::Visual;
};

/// Turns one head output into a SegmentationResult at height x width.
/// `stuff` flags classes by id (missing ids are things); `column_instance_ids`
/// carries per-column instance ids when known.
SegmentationResult postprocess(const HeadOutput& head, int height, int width, const Thresholds& thresholds,
                               const std::vector<bool>& stuff = {},
                               const std::vector<int>& column_instance_ids = {});

/// Forward pass with the bundle's tokens (fused when both are present) and postprocess.
SegmentationResult segment(SegModel& model, const Tensor& image, const PromptBundle& bundle,
                           const Thresholds& thresholds = {}, const std::vector<bool>& stuff = {});

/// Panoptic segments of a result as metric segments.
std::vector<Segment> panoptic_segments(const SegmentationResult& result);

struct Exemplar {
    Tensor image;               // 3 x H x W
    std::vector<Tensor> masks;  // H x W each
    std::vector<int> class_ids;
};

/// Tokens of every exemplar instance, concatenated in order.
PromptTokens build_fewshot_prompts(const ModelPool& pool, const std::vector<Exemplar>& exemplars);

/// Per-frame token store with FIFO eviction; the first entry can be pinned.
class MemoryBank {
public:
    explicit MemoryBank(int capacity = 8, bool pin_first = true);

    void push(PromptTokens tokens);
    /// All stored tokens, oldest first.
    PromptTokens tokens() const;

    int size() const { return static_cast<int>(entries_.size()); }
    int capacity() const { return capacity_; }
    bool pinned() const { return pin_first_; }
    const std::deque<PromptTokens>& entries() const { return entries_; }
    /// Number of push() calls so far; with pinning the first entry is push #0.
    int pushes() const { return pushes_; }
    /// Push index of every entry currently stored.
    const std::deque<int>& entry_ids() const { return ids_; }

private:
    int capacity_;
    bool pin_first_;
    std::deque<PromptTokens> entries_;
    std::deque<int> ids_;
    int pushes_ = 0;
};

struct VideoResult {
    std::vector<SegmentationResult> frames;
    int max_bank_size = 0;
    bool pinned_survived = true;
};

/// Segments every frame from the first frame's masks. Objects are keyed by
/// `object_ids`, which become the class ids of their tokens and predictions.
VideoResult propagate_video(SegModel& model, const std::vector<Tensor>& frames, const Tensor& first_masks,
                            const std::vector<int>& object_ids, int bank_capacity = 8,
                            const Thresholds& thresholds = {});

/// Writes one 0/255 PNG per instance plus `prefix.json` (mode, instances with
/// class, confidence and mask file). Optional semantic / panoptic indexed PNGs.
void write_prediction(const std::filesystem::path& out_dir, const std::string& prefix,
                      const SegmentationResult& result, const std::vector<std::string>& class_names,
                      bool semantic, bool panoptic);

}  // namespace openseg
