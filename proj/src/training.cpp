#include "openseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <zlib.h>

#include "openseg/errors.hpp"

namespace openseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* to_string(TrainModalities m) {
    switch (m) {
        case TrainModalities::Both: return "both";
        case TrainModalities::VisualOnly: return "visual";
        case TrainModalities::TextOnly: return "text";
    }
    return "?";
}

TrainModalities train_modalities_from_name(const std::string& name) {
    if (name == "both") return TrainModalities::Both;
    if (name == "visual") return TrainModalities::VisualOnly;
    if (name == "text") return TrainModalities::TextOnly;
    throw ConfigError("train.modalities must be one of both|visual|text, got '" + name + "'");
}

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.steps = 50000;
    c.batch_size = 64;
    c.base_lr = 1e-4;
    c.warmup_steps = 100;
    c.weight_decay = 0.05;
    c.beta1 = 0.9;
    c.beta2 = 0.999;
    c.scale_lo = 0.1;
    c.scale_hi = 2.0;
    c.crop_size = 896;
    c.n_negatives = 8;
    return c;
}

TrainConfig TrainConfig::desk() {
    TrainConfig c = paper();
    c.steps = 2000;
    c.batch_size = 8;
    c.base_lr = 1e-3;
    c.grad_clip = 1.0;
    c.scale_lo = 0.75;
    c.scale_hi = 1.25;
    c.crop_size = 128;
    c.n_negatives = 2;
    return c;
}

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("train.steps must be >= 1");
    if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("train.batch_size must be even and >= 2");
    if (!(base_lr >= 0.0)) throw ConfigError("train.base_lr must be >= 0");
    if (warmup_steps < 0 || warmup_steps >= steps) throw ConfigError("train.warmup_steps must be in [0, steps)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.betas must be in [0, 1)");
    if (!(scale_lo > 0.0 && scale_hi >= scale_lo)) throw ConfigError("train.scale_jitter must satisfy 0 < lo <= hi");
    if (crop_size < 16) throw ConfigError("train.crop_size must be >= 16");
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) throw ConfigError("train.flip_probability must be in [0, 1]");
    if (n_negatives < 0) throw ConfigError("train.n_negatives must be >= 0");
    if (!(crop_retention > 0.0 && crop_retention <= 1.0)) throw ConfigError("train.crop_retention must be in (0, 1]");
    if (crop_attempts < 1) throw ConfigError("train.crop_attempts must be >= 1");
    if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
}

int mask_resolution(const ModelPool& pool, int image_size) { return 4 * (image_size / pool.finest_stride()); }

GroundTruthSet make_ground_truth(const ModelPool& pool, const Tensor& masks, const std::vector<int>& class_ids,
                                 const std::vector<int>& prompt_class_ids) {
    const int size = static_cast<int>(masks.size(-1));
    const int res = mask_resolution(pool, size);
    if (size % res != 0) throw ShapeError("image side is not a multiple of the mask resolution");
    const int factor = size / res;
    GroundTruthSet gt;
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < class_ids.size(); ++i) {
        auto it = std::find(prompt_class_ids.begin(), prompt_class_ids.end(), class_ids[i]);
        if (it == prompt_class_ids.end()) continue;
        auto m = masks[static_cast<std::int64_t>(i)];
        out.push_back(factor == 1 ? m.to(torch::kFloat32) : downsample_mask(m, factor).to(torch::kFloat32));
        gt.class_ids.push_back(class_ids[i]);
        gt.prompt_columns.push_back(static_cast<int>(it - prompt_class_ids.begin()));
    }
    gt.masks = out.empty() ? torch::zeros({0, res, res}) : torch::stack(out, 0);
    return gt;
}

namespace {

AugmentConfig augment_config(const TrainConfig& cfg) {
    AugmentConfig a;
    a.flip_probability = cfg.flip_probability;
    a.scale_lo = cfg.scale_lo;
    a.scale_hi = cfg.scale_hi;
    a.crop_size = cfg.crop_size;
    return a;
}

/// Augmented target that still shows an instance of `class_id` (any class when < 0).
Sample augmented_target(const Sample& s, const TrainConfig& cfg, Rng& rng, int class_id) {
    const auto acfg = augment_config(cfg);
    for (int attempt = 0; attempt < 10; ++attempt) {
        auto out = augment(s, rng, acfg);
        if (class_id < 0 || !out.masks_of(class_id).empty()) return out;
    }
    return scale_and_crop(s, 1.0, 0, 0, cfg.crop_size);
}

std::vector<int> repeated(int value, std::size_t n) { return std::vector<int>(n, value); }

}  // namespace

Episode sample_visual_episode_crossimage(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                                         const TrainConfig& cfg, Rng& rng) {
    std::vector<int> eligible;
    for (int c = 0; c < data.vocab.size(); ++c) {
        if (data.hosts_of(c, split).size() >= 2) eligible.push_back(c);
    }
    if (eligible.empty()) throw SamplingError("no class appears in two or more images");
    const int c = eligible[static_cast<std::size_t>(rng.index(static_cast<int>(eligible.size())))];
    auto hosts = data.hosts_of(c, split);
    const int ti = rng.index(static_cast<int>(hosts.size()));
    int ei = rng.index(static_cast<int>(hosts.size()) - 1);
    if (ei >= ti) ++ei;

    Episode ep;
    ep.modality = Modality::Visual;
    ep.strategy = VisualStrategy::CrossImage;
    ep.target_index = hosts[static_cast<std::size_t>(ti)];
    ep.exemplar_index = hosts[static_cast<std::size_t>(ei)];
    const auto& exemplar = data.samples[static_cast<std::size_t>(ep.exemplar_index)];
    ep.target = augmented_target(data.samples[static_cast<std::size_t>(ep.target_index)], cfg, rng, c);

    std::vector<int> inst;
    for (int k = 0; k < exemplar.num_instances(); ++k) {
        if (exemplar.class_ids[static_cast<std::size_t>(k)] == c) inst.push_back(exemplar.instance_ids[static_cast<std::size_t>(k)]);
    }
    auto masks = exemplar.masks_of(c);
    ep.prompts = pool.encode_visual_prompts(exemplar.image, masks, repeated(c, masks.size()), inst);
    ep.gt = make_ground_truth(pool, ep.target.masks, ep.target.class_ids, ep.prompts.class_ids);
    return ep;
}

Sample crop_view(const Sample& sample, int top, int left, int side, int out_size) {
    const double scale = static_cast<double>(out_size) / side;
    return scale_and_crop(sample, scale, static_cast<int>(std::lround(top * scale)),
                          static_cast<int>(std::lround(left * scale)), out_size);
}

Episode sample_visual_episode_cropviews(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                                        const TrainConfig& cfg, Rng& rng) {
    std::vector<int> candidates;
    for (int i : split) {
        if (data.samples[static_cast<std::size_t>(i)].num_instances() > 0) candidates.push_back(i);
    }
    if (candidates.empty()) throw SamplingError("no image with an instance");
    const int index = candidates[static_cast<std::size_t>(rng.index(static_cast<int>(candidates.size())))];
    const auto& s = data.samples[static_cast<std::size_t>(index)];
    const int size = s.height();
    auto areas = s.masks.reshape({s.num_instances(), -1}).sum(1).to(torch::kDouble);

    auto draw_window = [&](int& top, int& left, int& side) {
        side = rng.range(size / 2, size);
        top = rng.range(0, size - side);
        left = rng.range(0, size - side);
    };
    auto retained = [&](int top, int left, int side) {
        auto inside = s.masks.narrow(1, top, side).narrow(2, left, side).reshape({s.num_instances(), -1}).sum(1);
        return (inside.to(torch::kDouble) >= areas * cfg.crop_retention);
    };
    for (int attempt = 0; attempt < cfg.crop_attempts; ++attempt) {
        int t1, l1, s1, t2, l2, s2;
        draw_window(t1, l1, s1);
        draw_window(t2, l2, s2);
        auto both = retained(t1, l1, s1) & retained(t2, l2, s2);
        if (!both.any().item<bool>()) continue;
        std::vector<int> shared;
        for (int k = 0; k < s.num_instances(); ++k) {
            if (both[k].item<bool>()) shared.push_back(k);
        }
        const int k = shared[static_cast<std::size_t>(rng.index(static_cast<int>(shared.size())))];
        const int c = s.class_ids[static_cast<std::size_t>(k)];
        auto exemplar = crop_view(s, t1, l1, s1, cfg.crop_size);
        auto target = crop_view(s, t2, l2, s2, cfg.crop_size);
        if (rng.bernoulli(cfg.flip_probability)) target = flip_horizontal(target);
        const int inst = s.instance_ids[static_cast<std::size_t>(k)];
        auto pos = std::find(exemplar.instance_ids.begin(), exemplar.instance_ids.end(), inst);
        if (pos == exemplar.instance_ids.end() || target.masks_of(c).empty()) continue;

        Episode ep;
        ep.modality = Modality::Visual;
        ep.strategy = VisualStrategy::CropViews;
        ep.target_index = index;
        ep.exemplar_index = index;
        ep.target = std::move(target);
        const auto row = pos - exemplar.instance_ids.begin();
        ep.prompts = pool.encode_visual_prompts(exemplar.image, {exemplar.masks[row]}, {c}, {inst});
        ep.gt = make_ground_truth(pool, ep.target.masks, ep.target.class_ids, ep.prompts.class_ids);
        return ep;
    }
    throw SamplingError("no crop pair kept a shared instance after " + std::to_string(cfg.crop_attempts) + " attempts");
}

Episode sample_text_episode(const Dataset& data, const std::vector<int>& split, const ModelPool& pool,
                            const TrainConfig& cfg, int n_negatives, Rng& rng) {
    if (n_negatives < 0) throw ConfigError("n_negatives must be >= 0");
    if (n_negatives > data.vocab.size() - 1)
        throw ConfigError("n_negatives=" + std::to_string(n_negatives) + " needs a vocabulary of at least " +
                          std::to_string(n_negatives + 1) + " classes");
    if (split.empty()) throw SamplingError("empty split");
    Episode ep;
    ep.modality = Modality::Text;
    ep.target_index = split[static_cast<std::size_t>(rng.index(static_cast<int>(split.size())))];
    ep.target = augmented_target(data.samples[static_cast<std::size_t>(ep.target_index)], cfg, rng, -1);
    auto present = ep.target.classes();
    std::vector<int> absent;
    for (int c = 0; c < data.vocab.size(); ++c) {
        if (std::find(present.begin(), present.end(), c) == present.end()) absent.push_back(c);
    }
    rng.shuffle(absent);
    absent.resize(std::min<std::size_t>(absent.size(), static_cast<std::size_t>(n_negatives)));
    std::vector<int> ids = present;
    ids.insert(ids.end(), absent.begin(), absent.end());
    rng.shuffle(ids);
    ep.prompts = pool.encode_text_prompts(ids, data.vocab);
    ep.gt = make_ground_truth(pool, ep.target.masks, ep.target.class_ids, ep.prompts.class_ids);
    return ep;
}

std::vector<Episode> make_batch(const Dataset& data, const ModelPool& pool, const TrainConfig& cfg, std::int64_t step) {
    if (cfg.batch_size % 2 != 0) throw ConfigError("train.batch_size must be even");
    const int n = cfg.batch_size;
    int n_visual = n / 2;
    if (cfg.modalities == TrainModalities::VisualOnly) n_visual = n;
    if (cfg.modalities == TrainModalities::TextOnly) n_visual = 0;
    const int n_negatives = std::min(cfg.n_negatives, data.vocab.size() - 1);
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(n));
    for (int slot = 0; slot < n; ++slot) {
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot)}));
        if (slot >= n_visual) {
            batch.push_back(sample_text_episode(data, data.train, pool, cfg, n_negatives, rng));
            continue;
        }
        // round-robin over strategies, continued across steps
        const bool crossimage = (step * n_visual + slot) % 2 == 0;
        if (crossimage) {
            batch.push_back(sample_visual_episode_crossimage(data, data.train, pool, cfg, rng));
            continue;
        }
        for (int retry = 0;; ++retry) {
            try {
                batch.push_back(sample_visual_episode_cropviews(data, data.train, pool, cfg, rng));
                break;
            } catch (const SamplingError&) {
                if (retry >= 50) throw;
            }
        }
    }
    return batch;
}

double lr_at_step(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.steps)
        throw ValidationError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.steps) + "]");
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step) / cfg.warmup_steps;
    return cfg.base_lr * static_cast<double>(cfg.steps - step) / static_cast<double>(cfg.steps - cfg.warmup_steps);
}

Trainer::Trainer(std::shared_ptr<SegModel> model, TrainConfig cfg, LossWeights weights)
    : model_(std::move(model)), cfg_(cfg), weights_(weights) {
    cfg_.validate();
    weights_.validate();
    auto opts = torch::optim::AdamWOptions(cfg_.base_lr)
                    .betas({cfg_.beta1, cfg_.beta2})
                    .weight_decay(cfg_.weight_decay)
                    .eps(1e-8);
    optimizer_ = std::make_unique<torch::optim::AdamW>(model_->decoder()->parameters(), opts);
}

LossResult Trainer::episode_loss(const Episode& episode) {
    auto& m = *model_;
    auto out = episode.modality == Modality::Text ? m.forward(episode.target.image, m.no_visual(), episode.prompts)
                                                  : m.forward(episode.target.image, episode.prompts, m.no_text());
    return total_loss(out, episode.gt, weights_);
}

StepResult Trainer::step(const std::vector<Episode>& batch) {
    if (batch.empty()) throw ValidationError("empty batch");
    StepResult r;
    r.lr = lr_at_step(step_ + 1, cfg_);
    model_->decoder()->train();
    optimizer_->zero_grad();
    Tensor total;
    for (const auto& ep : batch) {
        auto l = episode_loss(ep);
        auto scaled = l.loss / static_cast<double>(batch.size());
        total = total.defined() ? total + scaled : scaled;
        r.episode_losses.push_back(l.loss.item<double>());
    }
    r.loss = total.item<double>();
    if (!std::isfinite(r.loss)) {
        std::string dump;
        if (!dump_dir_.empty()) {
            fs::create_directories(dump_dir_);
            json d;
            d["step"] = step_ + 1;
            d["lr"] = r.lr;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                d["episodes"].push_back({{"slot", i},
                                         {"modality", to_string(batch[i].modality)},
                                         {"target", batch[i].target_index},
                                         {"exemplar", batch[i].exemplar_index},
                                         {"loss", std::isfinite(r.episode_losses[i]) ? json(r.episode_losses[i]) : json("nan")}});
            }
            const auto path = dump_dir_ / ("nonfinite_step_" + std::to_string(step_ + 1) + ".json");
            std::ofstream(path) << d.dump(2) << "\n";
            dump = path.string();
        }
        throw NumericalError("non-finite loss at step " + std::to_string(step_ + 1), dump);
    }
    total.backward();
    if (cfg_.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(model_->decoder()->parameters(), cfg_.grad_clip);
    for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(r.lr);
    optimizer_->step();
    ++step_;
    return r;
}

void Trainer::fit(const Dataset& data, std::int64_t max_steps,
                  const std::function<void(std::int64_t, const StepResult&)>& on_step) {
    std::int64_t done = 0;
    while (step_ < cfg_.steps && (max_steps < 0 || done < max_steps)) {
        auto batch = make_batch(data, model_->pool(), cfg_, step_);
        auto r = step(batch);
        ++done;
        if (on_step) on_step(step_, r);
    }
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

std::string dtype_name(torch::Dtype d) {
    switch (d) {
        case torch::kFloat32: return "float32";
        case torch::kFloat64: return "float64";
        case torch::kInt64: return "int64";
        default: throw ValidationError("checkpoint: unsupported tensor dtype");
    }
}

torch::Dtype dtype_from_name(const std::string& n) {
    if (n == "float32") return torch::kFloat32;
    if (n == "float64") return torch::kFloat64;
    if (n == "int64") return torch::kInt64;
    throw IntegrityError("checkpoint: unknown dtype '" + n + "'");
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_archive(const fs::path& path, std::int64_t step, const json& config, const NamedTensors& tensors) {
    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["step"] = step;
    manifest["config"] = config;
    std::string data;
    for (const auto& [name, t] : tensors) {
        auto c = t.detach().contiguous().cpu();
        const auto nbytes = static_cast<std::size_t>(c.numel()) * c.element_size();
        manifest["tensors"].push_back(
            {{"name", name}, {"dtype", dtype_name(c.scalar_type())}, {"shape", c.sizes().vec()}, {"offset", data.size()}, {"nbytes", nbytes}});
        data.append(static_cast<const char*>(c.data_ptr()), nbytes);
    }
    const auto text = manifest.dump();
    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out += data;
    put_u32(out, crc_of(out, out.size()));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IntegrityError("cannot write '" + tmp.string() + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
    }
    fs::rename(tmp, path);
}

struct Archive {
    json manifest;
    std::map<std::string, Tensor> tensors;
};

Archive read_archive(const fs::path& path, bool with_tensors) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw IntegrityError("'" + path.string() + "' is not a checkpoint");
    if (get_u32(bytes, bytes.size() - 4) != crc_of(bytes, bytes.size() - 4))
        throw IntegrityError("checkpoint '" + path.string() + "' failed its checksum");
    const std::size_t mlen = get_u32(bytes, sizeof(kMagic));
    const std::size_t data_start = sizeof(kMagic) + 4 + mlen;
    if (data_start > bytes.size() - 4) throw IntegrityError("checkpoint manifest is truncated");
    Archive a;
    try {
        a.manifest = json::parse(bytes.substr(sizeof(kMagic) + 4, mlen));
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint manifest: ") + e.what());
    }
    const int version = a.manifest.value("format_version", -1);
    if (version != kCheckpointFormatVersion)
        throw IntegrityError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointFormatVersion) + ")");
    if (!with_tensors) return a;
    const std::size_t data_len = bytes.size() - 4 - data_start;
    for (const auto& e : a.manifest.value("tensors", json::array())) {
        const auto offset = e.at("offset").get<std::size_t>();
        const auto nbytes = e.at("nbytes").get<std::size_t>();
        if (offset + nbytes > data_len) throw IntegrityError("checkpoint tensor extends past the data section");
        auto shape = e.at("shape").get<std::vector<std::int64_t>>();
        auto t = torch::empty(shape, dtype_from_name(e.at("dtype").get<std::string>()));
        if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes)
            throw IntegrityError("checkpoint tensor size disagrees with its shape");
        std::memcpy(t.data_ptr(), bytes.data() + data_start + offset, nbytes);
        a.tensors[e.at("name").get<std::string>()] = t;
    }
    return a;
}

CheckpointInfo info_of(const Archive& a) {
    CheckpointInfo info;
    info.format_version = a.manifest.at("format_version").get<int>();
    info.step = a.manifest.value("step", std::int64_t{0});
    info.config = a.manifest.value("config", json::object());
    return info;
}

void restore_parameters(const Archive& a, SegModel& model) {
    torch::NoGradGuard no_grad;
    for (auto& item : model.decoder()->named_parameters()) {
        auto it = a.tensors.find("model/" + item.key());
        if (it == a.tensors.end()) throw IntegrityError("checkpoint lacks parameter '" + item.key() + "'");
        if (it->second.sizes() != item.value().sizes())
            throw IntegrityError("checkpoint parameter '" + item.key() + "' has the wrong shape");
        item.value().copy_(it->second.to(item.value().scalar_type()));
    }
}

}  // namespace

void save_checkpoint(const fs::path& path, Trainer& trainer, const json& config_echo) {
    NamedTensors tensors;
    auto params = trainer.model().decoder()->named_parameters();
    for (const auto& item : params) tensors.emplace_back("model/" + item.key(), item.value());
    auto& state = trainer.optimizer().state();
    for (const auto& item : params) {
        auto it = state.find(item.value().unsafeGetTensorImpl());
        if (it == state.end()) continue;
        auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
        const auto base = "optim/" + item.key();
        tensors.emplace_back(base + "/step", torch::tensor({s.step()}, torch::kInt64));
        tensors.emplace_back(base + "/exp_avg", s.exp_avg());
        tensors.emplace_back(base + "/exp_avg_sq", s.exp_avg_sq());
    }
    write_archive(path, trainer.current_step(), config_echo, tensors);
}

CheckpointInfo read_checkpoint_info(const fs::path& path) { return info_of(read_archive(path, false)); }

CheckpointInfo load_checkpoint(const fs::path& path, Trainer& trainer) {
    auto a = read_archive(path, true);
    restore_parameters(a, trainer.model());
    auto& state = trainer.optimizer().state();
    state.clear();
    for (const auto& item : trainer.model().decoder()->named_parameters()) {
        const auto base = "optim/" + item.key();
        auto step = a.tensors.find(base + "/step");
        if (step == a.tensors.end()) continue;
        auto avg = a.tensors.find(base + "/exp_avg");
        auto sq = a.tensors.find(base + "/exp_avg_sq");
        if (avg == a.tensors.end() || sq == a.tensors.end())
            throw IntegrityError("checkpoint optimizer state for '" + item.key() + "' is incomplete");
        auto s = std::make_unique<torch::optim::AdamWParamState>();
        s->step(step->second.item<std::int64_t>());
        s->exp_avg(avg->second.to(item.value().scalar_type()).clone());
        s->exp_avg_sq(sq->second.to(item.value().scalar_type()).clone());
        state[item.value().unsafeGetTensorImpl()] = std::move(s);
    }
    auto info = info_of(a);
    trainer.set_step(info.step);
    return info;
}

CheckpointInfo load_model_weights(const fs::path& path, SegModel& model) {
    auto a = read_archive(path, true);
    restore_parameters(a, model);
    return info_of(a);
}

}  // namespace openseg
