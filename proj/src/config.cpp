#include "openseg/config.hpp"

#include <fstream>
#include <set>

#include "openseg/errors.hpp"

namespace openseg {

using json = nlohmann::json;

namespace {

/// Reads keys of one section into typed fields and rejects everything else.
class Section {
public:
    Section(const json& doc, std::string name) : name_(std::move(name)) {
        if (!doc.contains(name_)) return;
        obj_ = doc.at(name_);
        if (!obj_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
    }

    void pair(const char* key, double& lo, double& hi) {
        std::vector<double> v{lo, hi};
        get(key, v);
        if (v.size() != 2) throw ConfigError("config key '" + name_ + "." + key + "' must be a [lo, hi] pair");
        lo = v[0];
        hi = v[1];
    }

    void finish() const {
        if (!obj_.is_object()) return;
        for (const auto& [k, v] : obj_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
        }
    }

private:
    std::string name_;
    json obj_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig RunConfig::profile_defaults(const std::string& profile) {
    RunConfig c;
    c.profile = profile;
    c.pool = PoolConfig::desk();
    if (profile == "paper") {
        c.model = SegDecoderConfig::paper();
        c.train = TrainConfig::paper();
        c.out_dir = "runs/paper";
        c.checkpoint_every = 5000;
        c.data.scene.image_size = c.train.crop_size;
        c.data.scene.min_size = 24 * c.train.crop_size / 128;
        c.data.scene.max_size = 48 * c.train.crop_size / 128;
    } else if (profile == "desk") {
        c.model = SegDecoderConfig::desk();
        c.train = TrainConfig::desk();
        c.loss.cls = 20.0;  // the query-mean classification term is otherwise swamped by the mask terms
    } else {
        throw ConfigError("unknown profile '" + profile + "' (expected paper|desk)");
    }
    return c;
}

RunConfig RunConfig::from_json(const json& doc, const std::optional<std::string>& profile_override) {
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    static const std::set<std::string> top{"profile", "seed", "model", "loss", "train", "data", "eval", "pool"};
    for (const auto& [k, v] : doc.items()) {
        if (!top.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    std::string profile = "desk";
    if (doc.contains("profile")) {
        if (!doc["profile"].is_string()) throw ConfigError("config key 'profile' must be a string");
        profile = doc["profile"].get<std::string>();
    }
    if (profile_override) profile = *profile_override;
    RunConfig c = profile_defaults(profile);
    if (doc.contains("seed")) {
        if (!doc["seed"].is_number_unsigned()) throw ConfigError("config key 'seed' must be a non-negative integer");
        c.seed = doc["seed"].get<std::uint64_t>();
    }

    Section m(doc, "model");
    m.get("width", c.model.width);
    m.get("num_queries", c.model.num_queries);
    m.get("aligner_blocks", c.model.aligner_blocks);
    m.get("decoder_blocks", c.model.decoder_blocks);
    m.get("heads", c.model.heads);
    m.get("ffn_dim", c.model.ffn_dim);
    m.get("mask_mlp_depth", c.model.mask_mlp_depth);
    m.get("init_temperature", c.model.init_temperature);
    m.get("dtype", c.dtype);
    m.finish();

    Section l(doc, "loss");
    l.get("cls", c.loss.cls);
    l.get("bce", c.loss.bce);
    l.get("dice", c.loss.dice);
    l.get("no_object", c.loss.no_object);
    l.finish();

    Section t(doc, "train");
    t.get("steps", c.train.steps);
    t.get("batch_size", c.train.batch_size);
    t.get("base_lr", c.train.base_lr);
    t.get("warmup_steps", c.train.warmup_steps);
    t.get("weight_decay", c.train.weight_decay);
    t.get("beta1", c.train.beta1);
    t.get("beta2", c.train.beta2);
    t.pair("scale_jitter", c.train.scale_lo, c.train.scale_hi);
    t.get("crop_size", c.train.crop_size);
    t.get("flip_probability", c.train.flip_probability);
    t.get("n_negatives", c.train.n_negatives);
    std::string modalities = to_string(c.train.modalities);
    t.get("modalities", modalities);
    c.train.modalities = train_modalities_from_name(modalities);
    t.get("crop_retention", c.train.crop_retention);
    t.get("crop_attempts", c.train.crop_attempts);
    t.get("grad_clip", c.train.grad_clip);
    t.get("out_dir", c.out_dir);
    t.get("checkpoint_every", c.checkpoint_every);
    t.finish();

    Section d(doc, "data");
    auto& s = c.data.scene;
    d.get("path", c.data.path);
    d.get("n_images", c.data.n_images);
    d.get("n_val", c.data.n_val);
    d.get("image_size", s.image_size);
    std::vector<int> n_inst{s.min_instances, s.max_instances};
    d.get("n_instances", n_inst);
    if (n_inst.size() != 2) throw ConfigError("config key 'data.n_instances' must be a [min, max] pair");
    s.min_instances = n_inst[0];
    s.max_instances = n_inst[1];
    d.get("shape_classes", s.shape_classes);
    d.get("palette", s.palette);
    d.get("background_noise", s.background_noise);
    d.get("overlap_allowed", s.overlap_allowed);
    d.get("min_size", s.min_size);
    d.get("max_size", s.max_size);
    d.get("rotate", s.rotate);
    d.get("seed", s.seed);
    d.finish();

    Section e(doc, "eval");
    e.get("score_threshold", c.eval.thresholds.score);
    e.get("mask_threshold", c.eval.thresholds.mask);
    e.get("overlap_threshold", c.eval.thresholds.overlap);
    e.get("shots", c.eval.shots);
    e.get("bank_capacity", c.eval.bank_capacity);
    e.get("vos_videos", c.eval.vos_videos);
    e.get("vos_frames", c.eval.vos_frames);
    e.get("vos_speed", c.eval.vos_speed);
    e.get("max_images", c.eval.max_images);
    e.finish();

    if (doc.contains("pool")) {
        Section p(doc, "pool");
        json encoders;
        p.get("encoders", encoders);
        if (!encoders.is_null()) {
            if (!encoders.is_array()) throw ConfigError("config key 'pool.encoders' must be a list");
            c.pool.encoders.clear();
            for (const auto& enc : encoders) {
                if (!enc.is_object()) throw ConfigError("every pool encoder must be an object");
                EncoderSpec spec;
                static const std::set<std::string> keys{"name", "stride", "out_dim", "seed"};
                for (const auto& [k, v] : enc.items()) {
                    if (!keys.count(k)) throw ConfigError("unknown config key 'pool.encoders[]." + k + "'");
                }
                try {
                    spec.name = enc.at("name").get<std::string>();
                    spec.stride = enc.value("stride", spec.stride);
                    spec.out_dim = enc.value("out_dim", spec.out_dim);
                    spec.seed = enc.value("seed", spec.seed);
                } catch (const json::exception&) {
                    throw ConfigError("pool encoder entries need a string 'name' and integer stride/out_dim/seed");
                }
                c.pool.encoders.push_back(spec);
            }
        }
        p.get("prompt_encoder", c.pool.prompt_encoder);
        p.get("text_dim", c.pool.text_dim);
        p.get("text_seed", c.pool.text_seed);
        p.finish();
    }
    c.train.seed = c.seed;
    c.eval.seed = c.seed;
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::optional<std::string>& profile_override) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(doc, profile_override);
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    eval.seed = s;
}

json RunConfig::to_json() const {
    json j;
    j["profile"] = profile;
    j["seed"] = seed;
    j["model"] = {{"width", model.width},
                  {"num_queries", model.num_queries},
                  {"aligner_blocks", model.aligner_blocks},
                  {"decoder_blocks", model.decoder_blocks},
                  {"heads", model.heads},
                  {"ffn_dim", model.ffn_dim},
                  {"mask_mlp_depth", model.mask_mlp_depth},
                  {"init_temperature", model.init_temperature},
                  {"dtype", dtype}};
    j["loss"] = {{"cls", loss.cls}, {"bce", loss.bce}, {"dice", loss.dice}, {"no_object", loss.no_object}};
    j["train"] = {{"steps", train.steps},
                  {"batch_size", train.batch_size},
                  {"base_lr", train.base_lr},
                  {"warmup_steps", train.warmup_steps},
                  {"weight_decay", train.weight_decay},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"scale_jitter", {train.scale_lo, train.scale_hi}},
                  {"crop_size", train.crop_size},
                  {"flip_probability", train.flip_probability},
                  {"n_negatives", train.n_negatives},
                  {"modalities", to_string(train.modalities)},
                  {"crop_retention", train.crop_retention},
                  {"crop_attempts", train.crop_attempts},
                  {"grad_clip", train.grad_clip},
                  {"out_dir", out_dir},
                  {"checkpoint_every", checkpoint_every}};
    const auto& s = data.scene;
    j["data"] = {{"path", data.path},
                 {"n_images", data.n_images},
                 {"n_val", data.n_val},
                 {"image_size", s.image_size},
                 {"n_instances", {s.min_instances, s.max_instances}},
                 {"shape_classes", s.shape_classes},
                 {"palette", s.palette},
                 {"background_noise", s.background_noise},
                 {"overlap_allowed", s.overlap_allowed},
                 {"min_size", s.min_size},
                 {"max_size", s.max_size},
                 {"rotate", s.rotate},
                 {"seed", s.seed}};
    j["eval"] = {{"score_threshold", eval.thresholds.score},
                 {"mask_threshold", eval.thresholds.mask},
                 {"overlap_threshold", eval.thresholds.overlap},
                 {"shots", eval.shots},
                 {"bank_capacity", eval.bank_capacity},
                 {"vos_videos", eval.vos_videos},
                 {"vos_frames", eval.vos_frames},
                 {"vos_speed", eval.vos_speed},
                 {"max_images", eval.max_images}};
    json encoders = json::array();
    for (const auto& e : pool.encoders)
        encoders.push_back({{"name", e.name}, {"stride", e.stride}, {"out_dim", e.out_dim}, {"seed", e.seed}});
    j["pool"] = {{"encoders", encoders},
                 {"prompt_encoder", pool.prompt_encoder},
                 {"text_dim", pool.text_dim},
                 {"text_seed", pool.text_seed}};
    return j;
}

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    train.validate();
    data.scene.validate();
    eval.validate();
    pool.validate();
    torch_dtype();
    if (data.n_images < 1) throw ConfigError("data.n_images must be >= 1");
    if (data.n_val < 0 || data.n_val >= data.n_images) throw ConfigError("data.n_val must be in [0, n_images)");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
    for (const auto& e : pool.encoders) {
        if (data.scene.image_size % e.stride != 0 || train.crop_size % e.stride != 0)
            throw ConfigError("encoder '" + e.name + "' stride does not divide the image and crop sizes");
        if (e.stride % 4 != 0) throw ConfigError("encoder '" + e.name + "' stride must be a multiple of 4");
    }
}

torch::Dtype RunConfig::torch_dtype() const {
    if (dtype == "float32") return torch::kFloat32;
    if (dtype == "float64") return torch::kFloat64;
    throw ConfigError("model.dtype must be float32 or float64");
}

}  // namespace openseg
