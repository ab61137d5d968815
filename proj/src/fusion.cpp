#include "openseg/fusion.hpp"

#include <map>

#include "openseg/errors.hpp"

namespace openseg {

PromptTokens fuse_prompts(const PromptTokens& visual, const PromptTokens& text) {
    if (visual.width() != text.width())
        throw ShapeError("fuse_prompts: visual width " + std::to_string(visual.width()) + " differs from text width " +
                         std::to_string(text.width()));

    std::map<int, std::vector<std::int64_t>> visual_rows, text_rows;
    for (int i = 0; i < visual.size(); ++i) visual_rows[visual.class_ids[static_cast<std::size_t>(i)]].push_back(i);
    for (int i = 0; i < text.size(); ++i) text_rows[text.class_ids[static_cast<std::size_t>(i)]].push_back(i);

    std::map<int, int> classes;
    for (const auto& [c, rows] : visual_rows) classes[c] = 1;
    for (const auto& [c, rows] : text_rows) classes[c] |= 2;

    PromptTokens out;
    out.modality = Modality::Fused;
    std::vector<Tensor> pieces;
    const bool with_instances = !visual.instance_ids.empty();
    for (const auto& [c, which] : classes) {
        if (which == 3) {
            auto v_mean = visual.embeddings.index_select(0, torch::tensor(visual_rows[c])).mean(0);
            for (auto t : text_rows[c]) {
                pieces.push_back(((v_mean + text.embeddings[t]) * 0.5).unsqueeze(0));
                out.class_ids.push_back(c);
                if (with_instances) out.instance_ids.push_back(-1);
            }
        } else if (which == 1) {
            for (auto r : visual_rows[c]) {
                pieces.push_back(visual.embeddings[r].unsqueeze(0));
                out.class_ids.push_back(c);
                if (with_instances) out.instance_ids.push_back(visual.instance_ids[static_cast<std::size_t>(r)]);
            }
        } else {
            for (auto t : text_rows[c]) {
                pieces.push_back(text.embeddings[t].unsqueeze(0));
                out.class_ids.push_back(c);
                if (with_instances) out.instance_ids.push_back(-1);
            }
        }
    }
    const auto& like = visual.embeddings.defined() ? visual.embeddings : text.embeddings;
    out.embeddings = pieces.empty() ? torch::zeros({0, visual.width()}, like.options()) : torch::cat(pieces, 0);
    return out;
}

}  // namespace openseg
