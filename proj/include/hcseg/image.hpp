#pragma once

#include <cstdint>
#include <vector>

namespace hcseg {

// Integer map over an image grid, row-major.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> labels;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

    std::size_t size() const { return labels.size(); }
    std::int32_t& operator()(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::int32_t operator()(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    bool operator==(const LabelMap&) const = default;
};

// 8-bit interleaved RGB.
struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels; // [H × W × 3]

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}
    bool operator==(const RgbImage&) const = default;
};

} // namespace hcseg
