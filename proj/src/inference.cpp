#include "openseg/inference.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "openseg/errors.hpp"
#include "openseg/image_io.hpp"
#include "openseg/losses.hpp"
#include "openseg/metrics.hpp"

namespace openseg {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

void Thresholds::validate() const {
    for (double t : {score, mask, overlap}) {
        if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("eval thresholds must lie in [0, 1]");
    }
}

Modality PromptBundle::mode() const {
    if (has_visual() && has_text()) return Modality::Fused;
    return has_visual() ? Modality::Visual : Modality::Text;
}

void PromptBundle::validate() const {
    if (!has_visual() && !has_text()) throw ValidationError("prompt bundle has no tokens");
    if (visual) visual->validate();
    if (text) text->validate();
}

SegmentationResult postprocess(const HeadOutput& head, int height, int width, const Thresholds& thresholds,
                               const std::vector<bool>& stuff, const std::vector<int>& column_instance_ids) {
    torch::NoGradGuard no_grad;
    SegmentationResult r;
    const auto& scores = head.scores;
    auto groups = ClassGroups::of(scores.column_class_ids);
    auto probs = torch::softmax(reduce_by_class(scores, groups).to(torch::kFloat64), 1);
    auto prompt_logits = scores.logits.narrow(1, 0, scores.prompt_columns()).to(torch::kFloat64);
    const auto k = probs.size(0);
    Tensor mask_probs;
    if (groups.size() > 0) {
        mask_probs = torch::sigmoid(F::interpolate(head.masks.logits.unsqueeze(0).to(torch::kFloat32),
                                                   F::InterpolateFuncOptions()
                                                       .size(std::vector<std::int64_t>{height, width})
                                                       .mode(torch::kBilinear)
                                                       .align_corners(false))
                                         .squeeze(0));
    }

    std::vector<Tensor> weighted;  // conf x prob inside the mask, per instance
    for (std::int64_t q = 0; q < k && groups.size() > 0; ++q) {
        auto best = probs[q].narrow(0, 0, groups.size()).max(0);
        const double p = std::get<0>(best).item<double>();
        if (p < thresholds.score) continue;
        const int g = static_cast<int>(std::get<1>(best).item<std::int64_t>());
        auto prob = mask_probs[q];
        auto binary = prob >= thresholds.mask;
        const auto area = binary.sum().item<std::int64_t>();
        if (area == 0) continue;
        InstancePrediction inst;
        inst.mask = binary;
        inst.class_id = groups.class_ids[static_cast<std::size_t>(g)];
        inst.class_score = p;
        inst.confidence = std::clamp(p * prob.masked_select(binary).mean().item<double>(), 0.0, 1.0);
        inst.query = static_cast<int>(q);
        if (!column_instance_ids.empty()) {
            int best_col = -1;
            double best_logit = 0.0;
            for (int c = 0; c < scores.prompt_columns(); ++c) {
                if (groups.column_group[static_cast<std::size_t>(c)] != g) continue;
                const double v = prompt_logits[q][c].item<double>();
                if (best_col < 0 || v > best_logit) {
                    best_col = c;
                    best_logit = v;
                }
            }
            inst.instance_id = column_instance_ids.at(static_cast<std::size_t>(best_col));
        }
        weighted.push_back(torch::where(binary, prob.to(torch::kFloat64) * inst.confidence, torch::zeros_like(prob, torch::kFloat64)));
        r.instances.push_back(std::move(inst));
    }

    // semantic: per class, max over its instances; argmax over classes
    r.semantic = torch::full({height, width}, kNoClass, torch::kLong);
    if (!r.instances.empty()) {
        std::vector<int> classes;
        for (const auto& i : r.instances) classes.push_back(i.class_id);
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
        std::vector<Tensor> per_class;
        for (int c : classes) {
            Tensor agg = torch::zeros({height, width}, torch::kFloat64);
            for (std::size_t i = 0; i < r.instances.size(); ++i) {
                if (r.instances[i].class_id == c) agg = torch::maximum(agg, weighted[i]);
            }
            per_class.push_back(agg);
        }
        auto stacked = torch::stack(per_class, 0);
        auto [best, arg] = stacked.max(0);
        auto ids = torch::tensor(std::vector<std::int64_t>(classes.begin(), classes.end()), torch::kLong);
        r.semantic = torch::where(best > 0.0, ids.index_select(0, arg.reshape({-1})).reshape({height, width}), r.semantic);
    }

    // panoptic: paste in confidence order, drop mostly hidden things, merge stuff
    r.panoptic = torch::zeros({height, width}, torch::kLong);
    std::vector<std::size_t> order(r.instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return r.instances[a].confidence > r.instances[b].confidence;
    });
    auto occupied = torch::zeros({height, width}, torch::kBool);
    for (auto i : order) {
        const auto& inst = r.instances[i];
        const bool is_stuff = inst.class_id >= 0 && static_cast<std::size_t>(inst.class_id) < stuff.size() &&
                              stuff[static_cast<std::size_t>(inst.class_id)];
        auto visible = inst.mask & ~occupied;
        const double vis = visible.sum().item<double>();
        if (vis <= 0.0) continue;
        if (is_stuff) {
            auto seg = std::find_if(r.segments.begin(), r.segments.end(),
                                    [&](const PanopticSegment& s) { return !s.is_thing && s.class_id == inst.class_id; });
            if (seg != r.segments.end()) {
                r.panoptic.masked_fill_(visible, seg->id);
                occupied |= visible;
                continue;
            }
        } else if (vis / inst.mask.sum().item<double>() < thresholds.overlap) {
            continue;
        }
        PanopticSegment seg;
        seg.id = static_cast<int>(r.segments.size()) + 1;
        seg.class_id = inst.class_id;
        seg.is_thing = !is_stuff;
        r.panoptic.masked_fill_(visible, seg.id);
        occupied |= visible;
        r.segments.push_back(seg);
    }
    return r;
}

SegmentationResult segment(SegModel& model, const Tensor& image, const PromptBundle& bundle,
                           const Thresholds& thresholds, const std::vector<bool>& stuff) {
    bundle.validate();
    thresholds.validate();
    model.check_finite();
    torch::NoGradGuard no_grad;
    model.decoder()->eval();
    const auto visual = bundle.has_visual() ? *bundle.visual : model.no_visual();
    const auto text = bundle.has_text() ? *bundle.text : model.no_text();
    auto out = model.forward(image, visual, text, true);
    std::vector<int> instance_ids;
    if (out.prompt_mode == Modality::Visual && visual.instance_ids.size() == visual.class_ids.size())
        instance_ids = visual.instance_ids;
    auto r = postprocess(out.final, static_cast<int>(image.size(1)), static_cast<int>(image.size(2)), thresholds, stuff,
                         instance_ids);
    r.mode = bundle.mode();
    return r;
}

std::vector<Segment> panoptic_segments(const SegmentationResult& result) {
    std::vector<Segment> out;
    for (const auto& s : result.segments) out.push_back({result.panoptic == s.id, s.class_id});
    return out;
}

PromptTokens build_fewshot_prompts(const ModelPool& pool, const std::vector<Exemplar>& exemplars) {
    if (exemplars.empty()) throw ValidationError("few-shot prompting needs at least one exemplar");
    std::vector<PromptTokens> parts;
    for (const auto& e : exemplars) parts.push_back(pool.encode_visual_prompts(e.image, e.masks, e.class_ids));
    return PromptTokens::concat(parts);
}

MemoryBank::MemoryBank(int capacity, bool pin_first) : capacity_(capacity), pin_first_(pin_first) {
    if (capacity < 1) throw ConfigError("memory bank capacity must be >= 1");
}

void MemoryBank::push(PromptTokens tokens) {
    const int id = pushes_++;
    if (static_cast<int>(entries_.size()) == capacity_) {
        const bool keep_first = pin_first_ && ids_.front() == 0;
        if (keep_first && capacity_ == 1) return;  // only the pinned entry fits
        const std::size_t victim = keep_first ? 1 : 0;
        entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(victim));
        ids_.erase(ids_.begin() + static_cast<std::ptrdiff_t>(victim));
    }
    entries_.push_back(std::move(tokens));
    ids_.push_back(id);
}

PromptTokens MemoryBank::tokens() const {
    return PromptTokens::concat(std::vector<PromptTokens>(entries_.begin(), entries_.end()));
}

VideoResult propagate_video(SegModel& model, const std::vector<Tensor>& frames, const Tensor& first_masks,
                            const std::vector<int>& object_ids, int bank_capacity, const Thresholds& thresholds) {
    if (frames.empty()) throw ValidationError("video has no frames");
    if (first_masks.dim() != 3 || first_masks.size(0) != static_cast<std::int64_t>(object_ids.size()) || object_ids.empty())
        throw ValidationError("first-frame masks must be n x H x W with one object id each");
    std::vector<Tensor> masks;
    for (std::int64_t i = 0; i < first_masks.size(0); ++i) {
        if (first_masks[i].sum().item<std::int64_t>() == 0) throw ValidationError("first-frame mask is empty");
        masks.push_back(first_masks[i]);
    }
    const int h = static_cast<int>(frames[0].size(1)), w = static_cast<int>(frames[0].size(2));

    VideoResult out;
    MemoryBank bank(bank_capacity, true);
    bank.push(model.pool().encode_visual_prompts(frames[0], masks, object_ids, object_ids));
    out.max_bank_size = bank.size();

    // frame 0 is the given annotation
    SegmentationResult first;
    first.mode = Modality::Visual;
    first.semantic = torch::full({h, w}, kNoClass, torch::kLong);
    first.panoptic = torch::zeros({h, w}, torch::kLong);
    for (std::size_t i = 0; i < object_ids.size(); ++i) {
        auto m = masks[i].to(torch::kBool);
        first.instances.push_back({m, object_ids[i], 1.0, 1.0, -1, object_ids[i]});
        first.semantic.masked_fill_(m, object_ids[i]);
        first.panoptic.masked_fill_(m, static_cast<std::int64_t>(i) + 1);
        first.segments.push_back({static_cast<int>(i) + 1, object_ids[i], true});
    }
    out.frames.push_back(first);

    for (std::size_t f = 1; f < frames.size(); ++f) {
        PromptBundle bundle;
        bundle.visual = bank.tokens();
        auto r = segment(model, frames[f], bundle, thresholds);
        // best confident instance per object feeds the bank
        std::vector<Tensor> new_masks;
        std::vector<int> new_ids;
        for (int obj : object_ids) {
            const InstancePrediction* best = nullptr;
            for (const auto& inst : r.instances) {
                if (inst.class_id == obj && inst.confidence >= 0.5 && (!best || inst.confidence > best->confidence)) best = &inst;
            }
            if (best) {
                new_masks.push_back(best->mask.to(torch::kUInt8));
                new_ids.push_back(obj);
            }
        }
        if (!new_masks.empty()) bank.push(model.pool().encode_visual_prompts(frames[f], new_masks, new_ids, new_ids));
        out.max_bank_size = std::max(out.max_bank_size, bank.size());
        out.pinned_survived = out.pinned_survived && bank.entry_ids().front() == 0;
        out.frames.push_back(std::move(r));
    }
    return out;
}

void write_prediction(const fs::path& out_dir, const std::string& prefix, const SegmentationResult& result,
                      const std::vector<std::string>& class_names, bool semantic, bool panoptic) {
    fs::create_directories(out_dir);
    nlohmann::json side;
    side["mode"] = to_string(result.mode);
    side["instances"] = nlohmann::json::array();
    for (std::size_t i = 0; i < result.instances.size(); ++i) {
        const auto& inst = result.instances[i];
        const auto file = prefix + "_mask_" + std::to_string(i) + ".png";
        write_png(out_dir / file, (inst.mask.to(torch::kUInt8) * 255).unsqueeze(0));
        const std::string name = inst.class_id >= 0 && inst.class_id < static_cast<int>(class_names.size())
                                     ? class_names[static_cast<std::size_t>(inst.class_id)]
                                     : std::to_string(inst.class_id);
        side["instances"].push_back({{"class", name}, {"class_id", inst.class_id}, {"confidence", inst.confidence}, {"mask", file}});
    }
    const auto palette = label_palette();
    if (semantic) {
        // index 0 is void, class c is c + 1
        write_indexed_png(out_dir / (prefix + "_semantic.png"), (result.semantic + 1).clamp(0, 255), palette);
        side["semantic"] = prefix + "_semantic.png";
    }
    if (panoptic) {
        write_indexed_png(out_dir / (prefix + "_panoptic.png"), result.panoptic.clamp(0, 255), palette);
        side["panoptic"] = prefix + "_panoptic.png";
        for (const auto& s : result.segments)
            side["segments"].push_back({{"id", s.id}, {"class_id", s.class_id}, {"is_thing", s.is_thing}});
    }
    std::ofstream(out_dir / (prefix + ".json")) << side.dump(2) << "\n";
}

}  // namespace openseg
