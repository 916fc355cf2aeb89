#include "hcseg/decoder.hpp"

namespace hcseg {

MaskStack decode_step(const AssignmentMatrix& a, const MaskStack& m) {
    if (a.cols() != m.pixels()) {
        throw DimensionError("decode_step: assignment has " + std::to_string(a.cols()) + " prototypes but mask stack has " +
                             std::to_string(m.pixels()) + " pixels");
    }
    if (a.level + 1 != m.level) {
        throw DimensionError("decode_step: assignment level " + std::to_string(a.level) + " cannot decode level " +
                             std::to_string(m.level));
    }
    MaskStack out;
    out.level = a.level;
    out.grid = a.fine_shape;
    out.semantics = m.semantics;
    out.values = a.layout == AssignmentLayout::windowed ? window_mix(a.weights, *a.window, m.values)
                                                        : matmul(a.weights, m.values);
    return out;
}

MaskStack decode_full(std::span<const AssignmentMatrix> assignments, const MaskStack& m) {
    for (std::size_t i = 0; i + 1 < assignments.size(); ++i) {
        if (assignments[i].level + 1 != assignments[i + 1].level) {
            throw DimensionError("decode_full: assignment levels are not consecutive");
        }
    }
    MaskStack cur = m;
    for (std::size_t i = assignments.size(); i-- > 0;) cur = decode_step(assignments[i], cur);
    return cur;
}

MaskStack hard_decode(std::span<const AssignmentMatrix> assignments, const MaskStack& m) {
    std::vector<AssignmentMatrix> hard;
    hard.reserve(assignments.size());
    for (const auto& a : assignments) hard.push_back(harden_assignment(a));
    return decode_full(hard, m);
}

std::vector<std::size_t> hard_ancestors(std::span<const AssignmentMatrix> assignments) {
    if (assignments.empty()) return {};
    std::vector<std::vector<std::size_t>> parent;
    for (const auto& a : assignments) {
        const AssignmentMatrix h = harden_assignment(a);
        const std::size_t n = h.weights.dim(0), slots = h.weights.dim(1);
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t s = 0; s < slots; ++s) {
                if (h.weights[i * slots + s] == 1.0) {
                    p[i] = h.layout == AssignmentLayout::windowed
                               ? static_cast<std::size_t>(h.window->neighbor[i * slots + s])
                               : s;
                    break;
                }
            }
        }
        parent.push_back(std::move(p));
    }
    std::vector<std::size_t> out = parent.front();
    for (std::size_t lvl = 1; lvl < parent.size(); ++lvl)
        for (auto& id : out) id = parent[lvl][id];
    return out;
}

MaskStack upsample_to_image(const MaskStack& m, GridShape image) {
    if (m.grid.size() == 0 || image.height % m.grid.height != 0 || image.width % m.grid.width != 0) {
        throw DimensionError("upsample_to_image: grid " + std::to_string(m.grid.height) + "x" +
                             std::to_string(m.grid.width) + " does not divide image " + std::to_string(image.height) +
                             "x" + std::to_string(image.width));
    }
    if (m.pixels() != m.grid.size()) throw DimensionError("upsample_to_image: mask rows differ from grid size");
    const std::size_t fy = image.height / m.grid.height, fx = image.width / m.grid.width;
    if (fy != fx) throw DimensionError("upsample_to_image: anisotropic stride");
    MaskStack out = m;
    out.grid = image;
    int shift = 0;
    for (std::size_t f = fy; f > 1; f /= 2) ++shift;
    out.level = m.level - shift;
    if (fy == 1) return out;

    const std::size_t k = m.masks();
    std::vector<std::size_t> index;
    index.reserve(image.size() * k);
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
            const std::size_t src = (y / fy) * m.grid.width + (x / fx);
            for (std::size_t c = 0; c < k; ++c) index.push_back(src * k + c);
        }
    out.values = reshape(gather(m.values, index), {image.size(), k});
    return out;
}

} // namespace hcseg
