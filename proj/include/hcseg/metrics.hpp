#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "hcseg/image.hpp"

namespace hcseg {

enum class UeVariant {
    // Σ_S Σ_{C∩S≠∅} min(|C∩S|, |C\S|) / N
    min_side,
    // (Σ_S Σ_{C∩S≠∅} |C| − N) / N, the original leak-all formulation
    leak_all,
};

struct UeResult {
    double error = 0.0;
    std::vector<std::uint8_t> leak_mask; // pixels counted as leaked
};

UeResult undersegmentation_error(const LabelMap& partition, const LabelMap& gt, UeVariant variant = UeVariant::min_side);

// Dataset-level confusion matrix over K classes. Pixels whose gt label lies
// outside [0, K) are ignored; predictions outside [0, K) count as wrong.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes);

    void add(const LabelMap& pred, const LabelMap& gt);
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * (k_ + 1) + pred]; }
    std::size_t num_classes() const { return k_; }

    // IoU per class; nullopt when a class is absent from both pred and gt.
    std::vector<std::optional<double>> iou() const;
    double mean_iou() const;
    double pixel_accuracy() const;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_; // [K × (K + 1)], last column = out-of-range prediction
};

struct MiouResult {
    std::vector<std::optional<double>> iou;
    double mean_iou = 0.0;
    double pixel_accuracy = 0.0;
};

MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

struct PqResult {
    double pq = 0.0;
    double sq = 0.0;
    double rq = 0.0;
};

// Segments are (class, instance id) pairs. Matching pairs of equal class with
// IoU > 0.5 are true positives. Pixels whose gt class equals void_label are
// removed from both sides before IoU; unmatched predictions covering mostly
// void are not counted as false positives. Per-class PQ is averaged over the
// classes that occur in gt or prediction.
class PanopticAccumulator {
public:
    PanopticAccumulator(std::size_t num_classes, std::int32_t void_label);

    void add(const LabelMap& pred_labels, const LabelMap& pred_instances, const LabelMap& gt_labels,
             const LabelMap& gt_instances);
    PqResult result() const;

    struct ClassStats {
        double iou_sum = 0.0;
        std::uint64_t tp = 0;
        std::uint64_t fp = 0;
        std::uint64_t fn = 0;
    };
    const std::vector<ClassStats>& per_class() const { return stats_; }

private:
    std::size_t k_;
    std::int32_t void_label_;
    std::vector<ClassStats> stats_;
};

PqResult panoptic_quality(const LabelMap& pred_labels, const LabelMap& pred_instances, const LabelMap& gt_labels,
                          const LabelMap& gt_instances, std::size_t num_classes, std::int32_t void_label);

// 1 where any 4-neighbor carries a different label.
std::vector<std::uint8_t> boundary_map(const LabelMap& labels);

// Relabel to the contiguous range [0, k) in order of first appearance.
LabelMap compact_labels(const LabelMap& labels);

} // namespace hcseg
