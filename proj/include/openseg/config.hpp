#pragma once

// Run configuration: one JSON document with sections model / loss / train /
// data / eval / pool on top of a named profile. Unknown keys are errors.

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "openseg/evaluate.hpp"
#include "openseg/losses.hpp"
#include "openseg/training.hpp"

namespace openseg {

struct DataConfig {
    std::string path = "data/shapes";
    int n_images = 550;
    int n_val = 50;
    SceneSpec scene;
};

struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 0;
    SegDecoderConfig model;
    std::string dtype = "float32";
    LossWeights loss;
    TrainConfig train;
    std::string out_dir = "runs/desk";
    int checkpoint_every = 500;
    DataConfig data;
    EvalConfig eval;
    PoolConfig pool;

    /// Defaults of a profile: "paper" or "desk".
    static RunConfig profile_defaults(const std::string& profile);

    /// Profile defaults overlaid with `doc`. `profile_override` wins over doc["profile"].
    static RunConfig from_json(const nlohmann::json& doc, const std::optional<std::string>& profile_override = {});
    static RunConfig load(const std::filesystem::path& path, const std::optional<std::string>& profile_override = {});

    /// Sets the run seed everywhere it is consumed.
    void set_seed(std::uint64_t s);

    nlohmann::json to_json() const;
    void validate() const;
    torch::Dtype torch_dtype() const;
};

}  // namespace openseg
