#include "openseg/evaluate.hpp"

#include <algorithm>

#include "openseg/errors.hpp"

namespace openseg {

const char* to_string(EvalTask t) {
    switch (t) {
        case EvalTask::Text: return "text";
        case EvalTask::Visual: return "visual";
        case EvalTask::Fused: return "fused";
        case EvalTask::FewShot: return "fewshot";
        case EvalTask::Vos: return "vos";
    }
    return "?";
}

EvalTask eval_task_from_name(const std::string& name) {
    for (auto t : {EvalTask::Text, EvalTask::Visual, EvalTask::Fused, EvalTask::FewShot, EvalTask::Vos}) {
        if (name == to_string(t)) return t;
    }
    throw ConfigError("unknown eval task '" + name + "' (expected text|visual|fused|fewshot|vos)");
}

void EvalConfig::validate() const {
    thresholds.validate();
    if (shots < 1) throw ConfigError("eval.shots must be >= 1");
    if (bank_capacity < 1) throw ConfigError("eval.bank_capacity must be >= 1");
    if (vos_videos < 1 || vos_frames < 1) throw ConfigError("eval.vos_videos and eval.vos_frames must be >= 1");
    if (!(vos_speed >= 0.0)) throw ConfigError("eval.vos_speed must be >= 0");
}

std::vector<Exemplar> pick_exemplars(const Dataset& data, int class_id, int image_id, int shots, std::uint64_t seed) {
    auto hosts = data.hosts_of(class_id, data.train);
    if (hosts.empty()) throw SamplingError("class '" + data.vocab.names.at(static_cast<std::size_t>(class_id)) + "' has no train image");
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(image_id), static_cast<std::uint64_t>(class_id), 0x65786dULL}));
    rng.shuffle(hosts);
    hosts.resize(std::min<std::size_t>(hosts.size(), static_cast<std::size_t>(shots)));
    std::vector<Exemplar> out;
    for (int h : hosts) {
        const auto& s = data.samples[static_cast<std::size_t>(h)];
        auto masks = s.masks_of(class_id);
        out.push_back({s.image, masks, std::vector<int>(masks.size(), class_id)});
    }
    return out;
}

PromptBundle eval_prompts(const SegModel& model, const Dataset& data, EvalTask task, int image_id,
                          const EvalConfig& cfg) {
    PromptBundle bundle;
    std::vector<int> all(static_cast<std::size_t>(data.vocab.size()));
    for (int c = 0; c < data.vocab.size(); ++c) all[static_cast<std::size_t>(c)] = c;
    if (task == EvalTask::Text || task == EvalTask::Fused) bundle.text = model.pool().encode_text_prompts(all, data.vocab);
    if (task == EvalTask::Visual || task == EvalTask::Fused || task == EvalTask::FewShot) {
        const int shots = task == EvalTask::FewShot ? cfg.shots : 1;
        std::vector<Exemplar> ex;
        for (int c : all) {
            auto part = pick_exemplars(data, c, image_id, shots, cfg.seed);
            ex.insert(ex.end(), part.begin(), part.end());
        }
        bundle.visual = build_fewshot_prompts(model.pool(), ex);
    }
    if (task == EvalTask::Vos) throw ConfigError("vos is evaluated on synthetic videos, not the image split");
    return bundle;
}

EvalResult evaluate(SegModel& model, const Dataset& data, EvalTask task, const EvalConfig& cfg) {
    cfg.validate();
    if (task == EvalTask::Vos) throw ConfigError("use evaluate_vos for the vos task");
    if (data.val.empty()) throw ConfigError("dataset has no validation images");
    EvalResult res;
    IouAccumulator iou(data.vocab.size());
    PqAccumulator pq;
    std::vector<ImageDetections> detections;
    std::size_t n = data.val.size();
    if (cfg.max_images >= 0) n = std::min(n, static_cast<std::size_t>(cfg.max_images));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = data.samples[static_cast<std::size_t>(data.val[i])];
        auto bundle = eval_prompts(model, data, task, s.image_id, cfg);
        auto r = segment(model, s.image, bundle, cfg.thresholds, data.vocab.stuff_flags);
        iou.add(r.semantic, s.semantic());
        std::vector<Segment> gt;
        for (int k = 0; k < s.num_instances(); ++k) gt.push_back({s.masks[k].to(torch::kBool), s.class_ids[static_cast<std::size_t>(k)]});
        pq.add(panoptic_segments(r), gt);
        ImageDetections det;
        det.ground_truth = gt;
        for (const auto& inst : r.instances) det.predictions.push_back({inst.mask, inst.class_id, inst.confidence});
        detections.push_back(std::move(det));
        ++res.images;
    }
    auto m = iou.result();
    res.report.miou = m.miou;
    res.report.per_class_iou = m.per_class;
    auto p = pq.result();
    res.report.pq = p.pq;
    res.report.sq = p.sq;
    res.report.rq = p.rq;
    res.report.ap = average_precision(detections);
    return res;
}

EvalResult evaluate_vos(SegModel& model, const SceneSpec& scene, const EvalConfig& cfg) {
    cfg.validate();
    EvalResult res;
    double sum = 0.0;
    int count = 0;
    for (int v = 0; v < cfg.vos_videos; ++v) {
        auto video = generate_video(scene, cfg.vos_frames, cfg.vos_speed, derive_seed(cfg.seed, {0x766f73ULL, static_cast<std::uint64_t>(v)}));
        auto out = propagate_video(model, video.frames, video.masks[0], video.object_ids, cfg.bank_capacity, cfg.thresholds);
        res.vos_max_bank = std::max(res.vos_max_bank, out.max_bank_size);
        res.vos_pinned = res.vos_pinned && out.pinned_survived;
        for (std::size_t f = 1; f < out.frames.size(); ++f) {
            for (std::size_t o = 0; o < video.object_ids.size(); ++o) {
                auto pred = out.frames[f].semantic == video.object_ids[o];
                sum += mask_iou(pred, video.masks[f][static_cast<std::int64_t>(o)]);
                ++count;
            }
        }
        ++res.images;
    }
    res.vos_iou = count > 0 ? sum / count : 1.0;
    res.report.miou = res.vos_iou;
    return res;
}

}  // namespace openseg
