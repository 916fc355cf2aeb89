#include "hcseg/metrics.hpp"

#include <map>

#include "hcseg/errors.hpp"

namespace hcseg {

namespace {

void require_same_grid(const LabelMap& a, const LabelMap& b, const char* op) {
    if (a.height != b.height || a.width != b.width || a.size() != b.size()) {
        throw DimensionError(std::string(op) + ": resolution mismatch " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
    }
}

} // namespace

UeResult undersegmentation_error(const LabelMap& partition, const LabelMap& gt, UeVariant variant) {
    require_same_grid(partition, gt, "undersegmentation_error");
    const std::size_t n = gt.size();
    UeResult out;
    out.leak_mask.assign(n, 0);
    if (n == 0) return out;

    std::map<std::int32_t, std::uint64_t> cluster_size;
    std::map<std::pair<std::int32_t, std::int32_t>, std::uint64_t> overlap; // (segment, cluster)
    for (std::size_t j = 0; j < n; ++j) {
        ++cluster_size[partition.labels[j]];
        ++overlap[{gt.labels[j], partition.labels[j]}];
    }

    double total = 0.0;
    // pairs (segment, cluster) whose intersection / outside part is counted
    std::map<std::pair<std::int32_t, std::int32_t>, bool> count_inside;
    for (const auto& [key, inter] : overlap) {
        const std::uint64_t size = cluster_size[key.second];
        const std::uint64_t outside = size - inter;
        if (variant == UeVariant::min_side) {
            total += static_cast<double>(std::min(inter, outside));
            if (std::min(inter, outside) > 0) count_inside[key] = inter <= outside;
        } else {
            total += static_cast<double>(size);
            if (outside > 0) count_inside[key] = false;
        }
    }
    if (variant == UeVariant::leak_all) total -= static_cast<double>(n);
    out.error = total / static_cast<double>(n);

    for (std::size_t j = 0; j < n; ++j) {
        const std::int32_t c = partition.labels[j];
        for (const auto& [key, inside] : count_inside) {
            if (key.second != c) continue;
            const bool in_segment = gt.labels[j] == key.first;
            if (inside == in_segment) {
                out.leak_mask[j] = 1;
                break;
            }
        }
    }
    return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : k_(num_classes), counts_(num_classes * (num_classes + 1), 0) {}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
    require_same_grid(pred, gt, "ConfusionMatrix::add");
    for (std::size_t j = 0; j < gt.size(); ++j) {
        const std::int32_t g = gt.labels[j], p = pred.labels[j];
        if (g < 0 || static_cast<std::size_t>(g) >= k_) continue;
        const std::size_t pc = (p < 0 || static_cast<std::size_t>(p) >= k_) ? k_ : static_cast<std::size_t>(p);
        ++counts_[static_cast<std::size_t>(g) * (k_ + 1) + pc];
    }
}

std::vector<std::optional<double>> ConfusionMatrix::iou() const {
    std::vector<std::optional<double>> out(k_);
    for (std::size_t c = 0; c < k_; ++c) {
        std::uint64_t tp = at(c, c), gt_total = 0, pred_total = 0;
        for (std::size_t p = 0; p <= k_; ++p) gt_total += at(c, p);
        for (std::size_t g = 0; g < k_; ++g) pred_total += at(g, c);
        const std::uint64_t uni = gt_total + pred_total - tp;
        if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
    }
    return out;
}

double ConfusionMatrix::mean_iou() const {
    double acc = 0.0;
    std::size_t present = 0;
    for (const auto& v : iou()) {
        if (!v) continue;
        acc += *v;
        ++present;
    }
    return present ? acc / static_cast<double>(present) : 0.0;
}

double ConfusionMatrix::pixel_accuracy() const {
    std::uint64_t correct = 0, total = 0;
    for (std::size_t g = 0; g < k_; ++g) {
        correct += at(g, g);
        for (std::size_t p = 0; p <= k_; ++p) total += at(g, p);
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
    ConfusionMatrix cm(num_classes);
    cm.add(pred, gt);
    return {cm.iou(), cm.mean_iou(), cm.pixel_accuracy()};
}

PanopticAccumulator::PanopticAccumulator(std::size_t num_classes, std::int32_t void_label)
    : k_(num_classes), void_label_(void_label), stats_(num_classes) {}

void PanopticAccumulator::add(const LabelMap& pred_labels, const LabelMap& pred_instances, const LabelMap& gt_labels,
                              const LabelMap& gt_instances) {
    require_same_grid(pred_labels, gt_labels, "panoptic_quality");
    require_same_grid(pred_instances, gt_instances, "panoptic_quality");
    require_same_grid(pred_labels, pred_instances, "panoptic_quality");

    using Segment = std::pair<std::int32_t, std::int32_t>; // (class, instance)
    std::map<Segment, std::uint64_t> gt_area, pred_area, pred_void;
    std::map<std::pair<Segment, Segment>, std::uint64_t> inter;
    const auto valid_class = [this](std::int32_t c) {
        return c >= 0 && static_cast<std::size_t>(c) < k_ && c != void_label_;
    };
    for (std::size_t j = 0; j < gt_labels.size(); ++j) {
        const bool gt_void = !valid_class(gt_labels.labels[j]);
        const bool pr_void = !valid_class(pred_labels.labels[j]);
        const Segment g{gt_labels.labels[j], gt_instances.labels[j]};
        const Segment p{pred_labels.labels[j], pred_instances.labels[j]};
        if (gt_void) {
            if (!pr_void) ++pred_void[p];
            continue;
        }
        ++gt_area[g];
        if (pr_void) continue;
        ++pred_area[p];
        ++inter[{g, p}];
    }

    std::map<Segment, bool> gt_matched, pred_matched;
    for (const auto& [key, area] : inter) {
        const auto& [g, p] = key;
        if (g.first != p.first) continue;
        const std::uint64_t uni = gt_area[g] + pred_area[p] - area;
        const double iou = static_cast<double>(area) / static_cast<double>(uni);
        if (iou > 0.5) {
            auto& s = stats_[static_cast<std::size_t>(g.first)];
            s.iou_sum += iou;
            ++s.tp;
            gt_matched[g] = true;
            pred_matched[p] = true;
        }
    }
    for (const auto& [g, area] : gt_area) {
        if (!gt_matched.count(g)) ++stats_[static_cast<std::size_t>(g.first)].fn;
    }
    for (const auto& [p, area] : pred_area) {
        if (pred_matched.count(p)) continue;
        const std::uint64_t v = pred_void.count(p) ? pred_void[p] : 0;
        if (2 * v > area + v) continue; // mostly void
        ++stats_[static_cast<std::size_t>(p.first)].fp;
    }
}

PqResult PanopticAccumulator::result() const {
    PqResult out;
    std::size_t present = 0;
    for (const auto& s : stats_) {
        if (s.tp + s.fp + s.fn == 0) continue;
        const double denom = static_cast<double>(s.tp) + 0.5 * static_cast<double>(s.fp) + 0.5 * static_cast<double>(s.fn);
        const double sq = s.tp ? s.iou_sum / static_cast<double>(s.tp) : 0.0;
        const double rq = static_cast<double>(s.tp) / denom;
        out.pq += sq * rq;
        out.sq += sq;
        out.rq += rq;
        ++present;
    }
    if (present) {
        out.pq /= static_cast<double>(present);
        out.sq /= static_cast<double>(present);
        out.rq /= static_cast<double>(present);
    }
    return out;
}

PqResult panoptic_quality(const LabelMap& pred_labels, const LabelMap& pred_instances, const LabelMap& gt_labels,
                          const LabelMap& gt_instances, std::size_t num_classes, std::int32_t void_label) {
    PanopticAccumulator acc(num_classes, void_label);
    acc.add(pred_labels, pred_instances, gt_labels, gt_instances);
    return acc.result();
}

std::vector<std::uint8_t> boundary_map(const LabelMap& labels) {
    std::vector<std::uint8_t> out(labels.size(), 0);
    for (std::size_t y = 0; y < labels.height; ++y)
        for (std::size_t x = 0; x < labels.width; ++x) {
            const std::int32_t v = labels(y, x);
            const bool edge = (y > 0 && labels(y - 1, x) != v) || (y + 1 < labels.height && labels(y + 1, x) != v) ||
                              (x > 0 && labels(y, x - 1) != v) || (x + 1 < labels.width && labels(y, x + 1) != v);
            out[y * labels.width + x] = edge ? 1 : 0;
        }
    return out;
}

LabelMap compact_labels(const LabelMap& labels) {
    LabelMap out = labels;
    std::map<std::int32_t, std::int32_t> ids;
    for (auto& v : out.labels) {
        auto [it, inserted] = ids.emplace(v, static_cast<std::int32_t>(ids.size()));
        v = it->second;
    }
    return out;
}

} // namespace hcseg
