#pragma once

// Validation-split evaluation for each prompting mode.
//
// Every image is prompted with the whole vocabulary at once: class names for
// `text`, exemplar instances drawn from the train split for `visual` (one
// image per class) and `fewshot` (`shots` images per class), both for `fused`.

#include <cstdint>
#include <map>
#include <string>

#include "openseg/inference.hpp"
#include "openseg/synthdata.hpp"

namespace openseg {

enum class EvalTask { Text, Visual, Fused, FewShot, Vos };

const char* to_string(EvalTask t);
EvalTask eval_task_from_name(const std::string& name);  // throws ConfigError

struct EvalConfig {
    Thresholds thresholds;
    int shots = 5;
    int bank_capacity = 8;
    int vos_videos = 4;
    int vos_frames = 10;
    double vos_speed = 1.5;   // max pixels per frame
    std::uint64_t seed = 0;
    int max_images = -1;      // evaluate only the first n val images when >= 0

    void validate() const;
};

struct EvalResult {
    MetricReport report;
    int images = 0;
    /// VOS only: mean per-frame object IoU over frames after the first, and bank checks.
    double vos_iou = 0.0;
    int vos_max_bank = 0;
    bool vos_pinned = true;
};

/// Exemplars of `class_id` for val image `image_id`: `shots` distinct train images, seeded.
std::vector<Exemplar> pick_exemplars(const Dataset& data, int class_id, int image_id, int shots, std::uint64_t seed);

/// Prompts for one val image under `task` (not Vos).
PromptBundle eval_prompts(const SegModel& model, const Dataset& data, EvalTask task, int image_id,
                          const EvalConfig& cfg);

EvalResult evaluate(SegModel& model, const Dataset& data, EvalTask task, const EvalConfig& cfg);

/// Synthetic translating-shape videos drawn from `scene`.
EvalResult evaluate_vos(SegModel& model, const SceneSpec& scene, const EvalConfig& cfg);

}  // namespace openseg
