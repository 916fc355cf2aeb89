#include "hcseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

#include "hcseg/netpbm.hpp"
#include "hcseg/params.hpp"

namespace hcseg {

namespace {

struct Color {
    double r, g, b;
};

double color_distance(const Color& a, const Color& b) {
    return std::sqrt((a.r - b.r) * (a.r - b.r) + (a.g - b.g) * (a.g - b.g) + (a.b - b.b) * (a.b - b.b));
}

struct Box {
    std::size_t x0, y0, x1, y1; // inclusive-exclusive
    bool intersects(const Box& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
};

// Pixel-center membership test for each shape kind within its bounding box.
bool inside(std::int32_t kind, int orientation, const Box& b, double px, double py) {
    const double w = double(b.x1 - b.x0), h = double(b.y1 - b.y0);
    const double u = (px - double(b.x0)) / w, v = (py - double(b.y0)) / h; // in [0, 1]
    switch (kind) {
    case kDisk: {
        const double r = 0.5 * w;
        const double dx = px - (double(b.x0) + r), dy = py - (double(b.y0) + r);
        return dx * dx + dy * dy <= r * r;
    }
    case kRectangle:
        return u >= 0 && u <= 1 && v >= 0 && v <= 1;
    case kTriangle: {
        // apex on one side, base on the opposite side
        double a = 0, t = 0;
        switch (orientation) {
        case 0: a = v, t = u; break;       // apex up
        case 1: a = 1 - v, t = u; break;   // apex down
        case 2: a = u, t = v; break;       // apex left
        default: a = 1 - u, t = v; break;  // apex right
        }
        return std::fabs(t - 0.5) <= 0.5 * a;
    }
    default:
        return false;
    }
}

} // namespace

const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> names = {"background", "disk", "rectangle", "triangle"};
    return names;
}

Sample synthesize_sample(const SyntheticSpec& spec, std::size_t index) {
    if (spec.min_shapes > spec.max_shapes || spec.min_size > spec.max_size || spec.min_size < 2 ||
        spec.max_size > std::min(spec.height, spec.width)) {
        throw ContractError("synthesize_sample: inconsistent shape count or size range");
    }
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ull + index + 0x5851F42D4C957F2Dull);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto pick = [&rng](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };

    const Color bg{0.1 + 0.5 * unit(rng), 0.1 + 0.5 * unit(rng), 0.1 + 0.5 * unit(rng)};
    std::vector<double> canvas(spec.height * spec.width * 3);
    for (std::size_t j = 0; j < spec.height * spec.width; ++j) {
        canvas[3 * j] = bg.r;
        canvas[3 * j + 1] = bg.g;
        canvas[3 * j + 2] = bg.b;
    }
    Sample s;
    s.semantic = LabelMap(spec.height, spec.width, kBackground);
    s.instance = LabelMap(spec.height, spec.width, 0);

    const std::size_t shapes = pick(spec.min_shapes, spec.max_shapes);
    std::vector<Box> placed;
    std::int32_t next_id = 1;
    for (std::size_t k = 0; k < shapes; ++k) {
        const auto kind = static_cast<std::int32_t>(pick(1, 3));
        const int orientation = static_cast<int>(pick(0, 3));
        Box box{};
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            const std::size_t w = pick(spec.min_size, spec.max_size);
            const std::size_t h = kind == kDisk ? w : pick(spec.min_size, spec.max_size);
            const std::size_t x0 = pick(0, spec.width - w), y0 = pick(0, spec.height - h);
            box = {x0, y0, x0 + w, y0 + h};
            ok = spec.allow_overlap ||
                 std::none_of(placed.begin(), placed.end(), [&](const Box& o) { return o.intersects(box); });
        }
        if (!ok) continue;
        Color c{};
        do {
            c = {unit(rng), unit(rng), unit(rng)};
        } while (color_distance(c, bg) < 0.45);
        placed.push_back(box);
        const std::int32_t id = next_id++;
        for (std::size_t y = box.y0; y < box.y1; ++y)
            for (std::size_t x = box.x0; x < box.x1; ++x) {
                if (!inside(kind, orientation, box, double(x) + 0.5, double(y) + 0.5)) continue;
                const std::size_t j = y * spec.width + x;
                canvas[3 * j] = c.r;
                canvas[3 * j + 1] = c.g;
                canvas[3 * j + 2] = c.b;
                s.semantic.labels[j] = kind;
                s.instance.labels[j] = id;
            }
    }

    s.rgb = RgbImage(spec.height, spec.width);
    for (std::size_t i = 0; i < canvas.size(); ++i) {
        const double v = canvas[i] + spec.noise * (2.0 * unit(rng) - 1.0);
        s.rgb.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    s.image = image_to_tensor(s.rgb);
    return s;
}

std::vector<Sample> synthesize(const SyntheticSpec& spec, std::size_t first, std::size_t count) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synthesize_sample(spec, first + i));
    return out;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
    DatasetManifest m;
    m.class_names = synthetic_class_names();
    m.root = out_dir;
    const std::size_t total = spec.count + spec.val_count;
    for (std::size_t i = 0; i < total; ++i) {
        const Sample s = synthesize_sample(spec, i);
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06zu", i);
        ManifestItem item{std::filesystem::path("images") / (std::string(stem) + ".ppm"),
                          std::filesystem::path("semantic") / (std::string(stem) + ".pgm"),
                          std::filesystem::path("instance") / (std::string(stem) + ".pgm"),
                          i < spec.count ? "train" : "val"};
        save_rgb(s.rgb, out_dir / item.image);
        save_labels(s.semantic, out_dir / item.semantic);
        save_labels(s.instance, out_dir / item.instance);
        m.items.push_back(std::move(item));
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["schema_version"] = DatasetManifest::kSchemaVersion;
    j["kind"] = "hcseg-dataset";
    j["overlap_policy"] = manifest.overlap_policy;
    auto classes = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < manifest.class_names.size(); ++i) {
        classes.push_back({{"id", i}, {"name", manifest.class_names[i]}});
    }
    j["classes"] = classes;
    auto items = nlohmann::ordered_json::array();
    for (const auto& it : manifest.items) {
        items.push_back({{"image", it.image.generic_string()},
                         {"semantic", it.semantic.generic_string()},
                         {"instance", it.instance.generic_string()},
                         {"split", it.split}});
    }
    j["items"] = items;
    const std::string text = j.dump(2) + "\n";
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": invalid JSON: " + e.what(), e.byte);
    }
    try {
        if (j.at("schema_version").get<int>() != DatasetManifest::kSchemaVersion) {
            throw ContractError(path.string() + ": unsupported manifest schema_version");
        }
        DatasetManifest m;
        m.root = path.parent_path();
        m.overlap_policy = j.value("overlap_policy", "painter");
        for (const auto& c : j.at("classes")) m.class_names.push_back(c.at("name").get<std::string>());
        for (const auto& it : j.at("items")) {
            ManifestItem item{it.at("image").get<std::string>(), it.at("semantic").get<std::string>(),
                              it.at("instance").get<std::string>(), it.value("split", "train")};
            for (const auto* p : {&item.image, &item.semantic, &item.instance}) {
                if (!std::filesystem::exists(m.root / *p)) {
                    throw IoError(path.string() + ": referenced file '" + (m.root / *p).string() + "' does not exist");
                }
            }
            m.items.push_back(std::move(item));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(path.string() + ": malformed manifest: " + e.what());
    }
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::string& split) {
    std::vector<Sample> out;
    for (const auto& it : manifest.items) {
        if (!split.empty() && it.split != split) continue;
        Sample s;
        s.rgb = load_rgb(manifest.root / it.image);
        s.semantic = load_labels(manifest.root / it.semantic);
        s.instance = load_labels(manifest.root / it.instance);
        if (s.semantic.height != s.rgb.height || s.semantic.width != s.rgb.width ||
            s.instance.height != s.rgb.height || s.instance.width != s.rgb.width) {
            throw DimensionError("dataset item '" + it.image.string() + "' has label maps of a different size");
        }
        s.image = image_to_tensor(s.rgb);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace hcseg
