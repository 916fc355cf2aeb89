#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

// Binary Netpbm only: P6 (RGB, maxval ≤ 255) and P5 (gray, maxval ≤ 65535,
// two bytes big-endian per sample above 255). Header tokens are separated by
// whitespace and may be interleaved with '#' comments; exactly one whitespace
// byte separates maxval from the raster.
RgbImage parse_ppm(std::span<const std::uint8_t> bytes);
LabelMap parse_pgm(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
// 8-bit when every label fits in [0, 255], otherwise 16-bit.
std::vector<std::uint8_t> encode_pgm(const LabelMap& labels);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// P6 file → [3 × H × W] tensor in [0, 1].
Tensor load_image(const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path);
RgbImage load_rgb(const std::filesystem::path& path);

Tensor image_to_tensor(const RgbImage& image);

void save_labels(const LabelMap& labels, const std::filesystem::path& path);
void save_rgb(const RgbImage& image, const std::filesystem::path& path);

// Boundaries painted black, then leaked pixels painted red, over `base`.
// Either mask may be empty.
RgbImage make_overlay(const RgbImage& base, std::span<const std::uint8_t> boundary,
                      std::span<const std::uint8_t> leakage);

// Distinct color per label, for visualizing label maps.
RgbImage colorize(const LabelMap& labels);

} // namespace hcseg
