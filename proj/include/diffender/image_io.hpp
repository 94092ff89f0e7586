#pragma once

#include <filesystem>
#include <vector>

#include "diffender/common.hpp"

namespace diffender {

/// Reads an 8-bit PNG (gray or colour) as [C,H,W] in [0,1], RGB channel order.
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes [C,H,W] (C = 1 or 3) as an 8-bit PNG, rounding to nearest.
void write_png(const torch::Tensor& image, const std::filesystem::path& path);

/// Hard mask [H,W] as a single-channel 0/255 PNG.
void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path);

/// Non-negative map [H,W] rendered with a jet colormap, scaled by its maximum.
void write_heatmap_png(const torch::Tensor& map, const std::filesystem::path& path);

/// input | diff heatmap | mask | restored, side by side, upscaled by `zoom`.
void write_quadriptych(const torch::Tensor& input, const torch::Tensor& diff,
                       const torch::Tensor& mask, const torch::Tensor& restored,
                       const std::filesystem::path& path, int zoom = 4);

/// 8-bit encode/decode helpers shared by PNG and JPEG paths.
std::vector<unsigned char> encode_image(const torch::Tensor& image, const std::string& ext,
                                        const std::vector<int>& params = {});
torch::Tensor decode_image(const std::vector<unsigned char>& bytes, int channels);

/// 8-bit JPEG encode then decode of [C,H,W] at quality 1..100.
torch::Tensor jpeg_round_trip(const torch::Tensor& image, int quality);

}  // namespace diffender
