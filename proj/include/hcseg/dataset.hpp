#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

enum ShapeClass : std::int32_t { kBackground = 0, kDisk = 1, kRectangle = 2, kTriangle = 3 };
inline constexpr std::size_t kSyntheticClasses = 4; // background + 3 shapes

const std::vector<std::string>& synthetic_class_names();

struct SyntheticSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    std::size_t min_size = 12; // bounding-box side range in pixels
    std::size_t max_size = 24;
    bool allow_overlap = false;
    double noise = 0.03; // uniform per-channel pixel noise amplitude
    std::uint64_t seed = 0;
    std::size_t count = 0;     // items tagged "train"
    std::size_t val_count = 0; // items tagged "val", drawn after the train items
};

struct Sample {
    RgbImage rgb;
    Tensor image;      // [3 × H × W] in [0, 1]
    LabelMap semantic; // ShapeClass per pixel
    LabelMap instance; // 0 = background, 1.. = shapes in drawing order
};

// Deterministic in (spec.seed, index). Shapes lie fully inside the canvas;
// later shapes paint over earlier ones.
Sample synthesize_sample(const SyntheticSpec& spec, std::size_t index);
std::vector<Sample> synthesize(const SyntheticSpec& spec, std::size_t first, std::size_t count);

struct ManifestItem {
    std::filesystem::path image;
    std::filesystem::path semantic;
    std::filesystem::path instance;
    std::string split;
};

struct DatasetManifest {
    static constexpr int kSchemaVersion = 1;
    std::vector<ManifestItem> items;
    std::vector<std::string> class_names;
    std::string overlap_policy = "painter";
    std::filesystem::path root; // item paths are relative to this directory
};

// Writes images/, semantic/, instance/ and manifest.json under out_dir.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
// Validates the schema version, existence of every file and matching sizes.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Items of one split ("" = all).
std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::string& split);

} // namespace hcseg
