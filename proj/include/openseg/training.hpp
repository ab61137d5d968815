#pragma once

// Co-training: episode samplers, the 1:1 modality batch, the learning-rate
// schedule, the optimization step and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "openseg/losses.hpp"
#include "openseg/segdecoder.hpp"
#include "openseg/synthdata.hpp"

namespace openseg {

/// Which prompt modalities a run trains on. `Both` is the 1:1 co-training mix.
enum class TrainModalities { Both, VisualOnly, TextOnly };

const char* to_string(TrainModalities m);
TrainModalities train_modalities_from_name(const std::string& name);

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double base_lr = 1e-4;
    int warmup_steps = 100;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
    double scale_lo = 0.75;
    double scale_hi = 1.25;
    int crop_size = 128;
    double flip_probability = 0.5;
    int n_negatives = 8;
    TrainModalities modalities = TrainModalities::Both;
    double crop_retention = 0.5;   // cropviews: fraction of an instance each view must keep
    int crop_attempts = 20;
    double grad_clip = 0.0;        // max global grad norm; 0 disables

    static TrainConfig paper();
    static TrainConfig desk();
    void validate() const;
};

enum class VisualStrategy { None, CrossImage, CropViews };

struct Episode {
    Sample target;            // augmented target image, masks at image resolution
    PromptTokens prompts;     // raw encoder tokens of a single modality
    GroundTruthSet gt;        // masks at mask-feature resolution
    Modality modality = Modality::Visual;
    VisualStrategy strategy = VisualStrategy::None;
    int target_index = -1;    // dataset indices, for diagnostics
    int exemplar_index = -1;
};

/// Resolution of the mask head for a square input of side `image_size`.
int mask_resolution(const ModelPool& pool, int image_size);

/// Ground truth for `masks` (n x S x S) at mask resolution; every instance
/// points at the first prompt column carrying its class.
GroundTruthSet make_ground_truth(const ModelPool& pool, const Tensor& masks, const std::vector<int>& class_ids,
                                 const std::vector<int>& prompt_class_ids);

/// Strategy A: target and exemplar are different images sharing a class c.
Episode sample_visual_episode_crossimage(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                                         const TrainConfig& cfg, Rng& rng);

/// Strategy B: two random crops of one image that both keep part of a shared instance.
Episode sample_visual_episode_cropviews(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                                        const TrainConfig& cfg, Rng& rng);

/// Crops `sample` to the window (top, left, side) and resizes it to `out_size`.
Sample crop_view(const Sample& sample, int top, int left, int side, int out_size);

/// Every class present in the target plus min(n_negatives, #absent) absent classes, shuffled.
Episode sample_text_episode(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                            const TrainConfig& cfg, int n_negatives, Rng& rng);

/// Deterministic batch for `step`: half visual (strategies alternating), half text.
std::vector<Episode> make_batch(const Dataset& data, const ModelPool& pool, const TrainConfig& cfg,
                                std::int64_t step);

/// Linear warmup to base_lr, then linear decay to 0 at cfg.steps.
double lr_at_step(std::int64_t step, const TrainConfig& cfg);

struct StepResult {
    double loss = 0.0;
    double lr = 0.0;
    std::vector<double> episode_losses;
};

/// Model, optimizer and position of one training run.
class Trainer {
public:
    Trainer(std::shared_ptr<SegModel> model, TrainConfig cfg, LossWeights weights = {});

    /// Loss of one episode (forward + matched loss), differentiable.
    LossResult episode_loss(const Episode& episode);

    /// One optimizer update on `batch` at the schedule's lr for the current step.
    /// Throws NumericalError (after writing a dump when dump_dir is set) on a non-finite loss.
    StepResult step(const std::vector<Episode>& batch);

    /// Runs until cfg.steps (or `max_steps` more steps). `on_step` sees every step.
    void fit(const Dataset& data, std::int64_t max_steps = -1,
             const std::function<void(std::int64_t, const StepResult&)>& on_step = {});

    std::int64_t current_step() const { return step_; }
    void set_step(std::int64_t s) { step_ = s; }
    SegModel& model() { return *model_; }
    std::shared_ptr<SegModel> model_ptr() { return model_; }
    torch::optim::AdamW& optimizer() { return *optimizer_; }
    const TrainConfig& config() const { return cfg_; }
    const LossWeights& weights() const { return weights_; }
    void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

private:
    std::shared_ptr<SegModel> model_;
    TrainConfig cfg_;
    LossWeights weights_;
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    std::int64_t step_ = 0;
    std::filesystem::path dump_dir_;
};

constexpr int kCheckpointFormatVersion = 1;

/// Writes model parameters, optimizer moments, the step and `config_echo` to one file.
void save_checkpoint(const std::filesystem::path& path, Trainer& trainer, const nlohmann::json& config_echo);

struct CheckpointInfo {
    int format_version = 0;
    std::int64_t step = 0;
    nlohmann::json config;
};

/// Reads only the manifest; verifies magic, version and checksum.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Restores parameters and optimizer state into an already-built trainer.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, Trainer& trainer);

/// Restores parameters only (inference).
CheckpointInfo load_model_weights(const std::filesystem::path& path, SegModel& model);

}  // namespace openseg
