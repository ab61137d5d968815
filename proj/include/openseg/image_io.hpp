#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace openseg {

/// 8-bit PNG, returned as a uint8 C x H x W tensor (C = 1 or 3; gray+alpha and RGBA are stripped).
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a uint8 C x H x W tensor (C = 1 or 3). Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const torch::Tensor& pixels);

/// Palette PNG from an H x W grid of indices in [0, palette.size()).
void write_indexed_png(const std::filesystem::path& path, const torch::Tensor& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);

/// uint8 image -> float 3 x H x W in [0, 1] (gray is replicated).
torch::Tensor to_float_image(const torch::Tensor& pixels);
/// float [0, 1] image -> uint8 with rounding.
torch::Tensor to_uint8_image(const torch::Tensor& image);

/// Deterministic 256-color palette; index 0 is black.
std::vector<std::array<std::uint8_t, 3>> label_palette();

}  // namespace openseg
