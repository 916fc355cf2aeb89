#pragma once

#include <span>

#include "hcseg/clustering.hpp"

namespace hcseg {

enum class MaskSemantics {
    mask_probabilities,  // independent sigmoid outputs in [0, 1]
    class_probabilities, // rows on the simplex
};

// Per-pixel values of N_m masks (or classes) on the grid of one level.
struct MaskStack {
    int level = 0;
    GridShape grid;
    Tensor values; // [N × N_m], N == grid.size()
    MaskSemantics semantics = MaskSemantics::mask_probabilities;

    std::size_t pixels() const { return values.dim(0); }
    std::size_t masks() const { return values.dim(1); }
};

// M^(i) = A^(i) · M^(i+1). The windowed layout uses the 9-slot gather.
MaskStack decode_step(const AssignmentMatrix& a, const MaskStack& m);

// Left fold of decode_step from the coarsest level to the finest.
// `assignments` are ordered fine → coarse with consecutive levels, and the
// last one must map onto m's level. An empty list returns m.
MaskStack decode_full(std::span<const AssignmentMatrix> assignments, const MaskStack& m);

// decode_full over hardened assignments: piecewise-constant masks on the
// final cluster partition.
MaskStack hard_decode(std::span<const AssignmentMatrix> assignments, const MaskStack& m);

// Composite hard assignment from each finest-grid pixel to its coarsest
// ancestor prototype.
std::vector<std::size_t> hard_ancestors(std::span<const AssignmentMatrix> assignments);

// Nearest-neighbor replication across the residual stride.
MaskStack upsample_to_image(const MaskStack& m, GridShape image);

} // namespace hcseg
