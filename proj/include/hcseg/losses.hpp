#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

struct LossWeights {
    double ce = 5.0;     // mask binary cross-entropy
    double dice = 5.0;
    double cls = 2.0;    // classification cross-entropy
    double reg = 0.1;    // Σ|s| over clustering modules
    double no_object = 0.1;
    double pixel = 1.0;  // per-pixel head cross-entropy

    void validate() const;
};

inline constexpr double kProbabilityFloor = 1e-7;
inline constexpr double kDiceSmoothing = 1.0;

// Mean binary cross-entropy over every entry; pred clamped to
// [1e-7, 1 − 1e-7]. pred and target are [N × G].
Tensor bce_mask_loss(const Tensor& pred, const Tensor& target);

// Mean over columns of 1 − (2Σpt + σ) / (Σp + Σt + σ).
Tensor dice_loss(const Tensor& pred, const Tensor& target, double smoothing = kDiceSmoothing);

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (query, gt segment), sorted by query
    std::vector<std::size_t> unmatched;                     // queries assigned to no-object
    double total_cost = 0.0;                                // summed in query order
};

// Minimum-cost injective assignment (Kuhn–Munkres with potentials) for a
// rectangular [N_m × G] cost. When G ≤ N_m every segment is matched.
MatchResult hungarian_match(const Tensor& cost);

// Weighted cross-entropy: matched queries toward their segment class,
// unmatched ones toward the no-object column (weight no_object_weight).
// Normalized by the total weight. class_probs is [N_m × (K + 1)].
Tensor classification_loss(const Tensor& class_probs, const MatchResult& match,
                           std::span<const std::int32_t> gt_classes, double no_object_weight);

// Σ_i |s_i|; subgradient 0 at 0.
Tensor scale_regularizer(std::span<const Tensor> scales);

// Mean of −log p[j, gt_j] over pixels, p clamped below at 1e-7.
Tensor pixel_cross_entropy(const Tensor& probs, const LabelMap& gt);

// Cost[i, g] = ce·BCE(M_i, T_g) + dice·dice(M_i, T_g) − cls·P[i, class_g],
// computed without gradient tracking.
Tensor matching_cost(const Tensor& masks, const Tensor& class_probs, const Tensor& targets,
                     std::span<const std::int32_t> gt_classes, const LossWeights& weights);

// Ground-truth segments of one image: every distinct instance id becomes one
// binary column, including the background (instance 0).
struct GtSegments {
    std::vector<std::int32_t> classes;
    std::vector<std::int32_t> instance_ids;
    Tensor masks; // [N × G]
};

GtSegments extract_segments(const LabelMap& semantic, const LabelMap& instance);

} // namespace hcseg
