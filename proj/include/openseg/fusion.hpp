#pragma once

#include "openseg/model_pool.hpp"

namespace openseg {

/// Class-paired averaging of visual and text prompts.
///
/// For a class present in both inputs the fused token is the mean of (the mean
/// of that class's visual tokens, that class's text token). Classes present in
/// only one input pass through unchanged. Output rows are ordered by class id,
/// then by input order. Differentiable; widths must match.
PromptTokens fuse_prompts(const PromptTokens& visual, const PromptTokens& text);

}  // namespace openseg
