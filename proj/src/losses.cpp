#include "hcseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace hcseg {

using detail::make_output;
using detail::record;
using detail::tracking;
using detail::wants_grad;

void LossWeights::validate() const {
    for (double w : {ce, dice, cls, reg, no_object, pixel}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("loss weights must be finite and non-negative");
    }
}

Tensor bce_mask_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw DimensionError("bce_mask_loss: resolution mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    }
    const std::size_t n = pred.numel();
    if (n == 0) throw DimensionError("bce_mask_loss: empty input");
    const double lo = kProbabilityFloor, hi = 1.0 - kProbabilityFloor;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(pred[i], lo, hi), t = target[i];
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    const bool track = tracking({&pred});
    Tensor result = make_output({}, {acc / double(n)}, track, "bce_mask_loss");
    if (track) {
        auto pi = pred.impl(), ti = target.impl(), oi = result.impl();
        record({pi}, result, [pi, ti, oi, n, lo, hi] {
            const double g = oi->grad[0] / double(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double raw = pi->data[i];
                if (raw < lo || raw > hi) continue;
                const double t = ti->data[i];
                pi->grad[i] += g * (-t / raw + (1.0 - t) / (1.0 - raw));
            }
        });
    }
    return result;
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double smoothing) {
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw DimensionError("dice_loss: pred and target must be equal [N×G] matrices");
    }
    if (!(smoothing >= 0.0)) throw DomainError("dice_loss: smoothing must be non-negative");
    const std::size_t n = pred.dim(0), g = pred.dim(1);
    if (g == 0) throw DimensionError("dice_loss: no masks");
    std::vector<double> inter(g, 0.0), psum(g, 0.0), tsum(g, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < g; ++c) {
            const double p = pred[j * g + c], t = target[j * g + c];
            inter[c] += p * t;
            psum[c] += p;
            tsum[c] += t;
        }
    double acc = 0.0;
    for (std::size_t c = 0; c < g; ++c) acc += 1.0 - (2.0 * inter[c] + smoothing) / (psum[c] + tsum[c] + smoothing);
    const bool track = tracking({&pred});
    Tensor result = make_output({}, {acc / double(g)}, track, "dice_loss");
    if (track) {
        auto pi = pred.impl(), ti = target.impl(), oi = result.impl();
        record({pi}, result, [=] {
            const double scale_g = oi->grad[0] / double(g);
            for (std::size_t c = 0; c < g; ++c) {
                const double num = 2.0 * inter[c] + smoothing;
                const double den = psum[c] + tsum[c] + smoothing;
                // d/dp [−num/den] = −(2t·den − num)/den²
                for (std::size_t j = 0; j < n; ++j) {
                    const double t = ti->data[j * g + c];
                    pi->grad[j * g + c] += scale_g * (-(2.0 * t * den - num) / (den * den));
                }
            }
        });
    }
    return result;
}

MatchResult hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2) throw DimensionError("hungarian_match: cost must be a matrix");
    for (double v : cost.data()) {
        if (!std::isfinite(v)) throw ContractError("hungarian_match: non-finite cost");
    }
    const std::size_t rows = cost.dim(0), cols = cost.dim(1);
    MatchResult out;
    if (rows == 0 || cols == 0) {
        for (std::size_t i = 0; i < rows; ++i) out.unmatched.push_back(i);
        return out;
    }
    // Solve with the smaller side as the "worker" side (n ≤ m).
    const bool transposed = cols < rows;
    const std::size_t n = transposed ? cols : rows, m = transposed ? rows : cols;
    const auto c = [&](std::size_t i, std::size_t j) {
        return transposed ? cost.at(j - 1, i - 1) : cost.at(i - 1, j - 1);
    };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::size_t> query_to_gt(rows, cols); // cols = unmatched
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        const std::size_t worker = p[j] - 1, job = j - 1;
        if (transposed) {
            query_to_gt[job] = worker;
        } else {
            query_to_gt[worker] = job;
        }
    }
    for (std::size_t q = 0; q < rows; ++q) {
        if (query_to_gt[q] == cols) {
            out.unmatched.push_back(q);
        } else {
            out.pairs.emplace_back(q, query_to_gt[q]);
            out.total_cost += cost.at(q, query_to_gt[q]);
        }
    }
    return out;
}

Tensor classification_loss(const Tensor& class_probs, const MatchResult& match,
                           std::span<const std::int32_t> gt_classes, double no_object_weight) {
    if (class_probs.rank() != 2) throw DimensionError("classification_loss: class_probs must be [N_m×(K+1)]");
    const std::size_t nm = class_probs.dim(0), kp1 = class_probs.dim(1);
    std::vector<std::size_t> target(nm, kp1 - 1);
    std::vector<double> weight(nm, no_object_weight);
    for (const auto& [q, g] : match.pairs) {
        if (q >= nm || g >= gt_classes.size()) throw DimensionError("classification_loss: match index out of range");
        const std::int32_t cls = gt_classes[g];
        if (cls < 0 || static_cast<std::size_t>(cls) >= kp1 - 1) {
            throw DimensionError("classification_loss: gt class out of range");
        }
        target[q] = static_cast<std::size_t>(cls);
        weight[q] = 1.0;
    }
    double wsum = 0.0;
    std::vector<std::size_t> flat(nm);
    for (std::size_t i = 0; i < nm; ++i) {
        flat[i] = i * kp1 + target[i];
        wsum += weight[i];
    }
    if (!(wsum > 0.0)) return scale(sum(gather(class_probs, flat)), 0.0);
    const Tensor picked = log(clamp(gather(class_probs, flat), kProbabilityFloor, 1.0));
    const Tensor w = Tensor::from({nm}, std::move(weight));
    return scale(sum(mul(picked, w)), -1.0 / wsum);
}

Tensor scale_regularizer(std::span<const Tensor> scales) {
    if (scales.empty()) return Tensor::scalar(0.0);
    return sum(abs(concat(scales)));
}

Tensor pixel_cross_entropy(const Tensor& probs, const LabelMap& gt) {
    if (probs.rank() != 2 || probs.dim(0) != gt.size()) {
        throw DimensionError("pixel_cross_entropy: probabilities " + shape_str(probs.shape()) + " vs " +
                             std::to_string(gt.size()) + " labelled pixels");
    }
    const std::size_t k = probs.dim(1);
    std::vector<std::size_t> flat(gt.size());
    for (std::size_t j = 0; j < gt.size(); ++j) {
        const std::int32_t c = gt.labels[j];
        if (c < 0 || static_cast<std::size_t>(c) >= k) throw DimensionError("pixel_cross_entropy: label out of range");
        flat[j] = j * k + static_cast<std::size_t>(c);
    }
    return scale(mean(log(clamp(gather(probs, flat), kProbabilityFloor, 1.0))), -1.0);
}

Tensor matching_cost(const Tensor& masks, const Tensor& class_probs, const Tensor& targets,
                     std::span<const std::int32_t> gt_classes, const LossWeights& weights) {
    if (masks.rank() != 2 || targets.rank() != 2 || masks.dim(0) != targets.dim(0)) {
        throw DimensionError("matching_cost: masks [N×N_m] and targets [N×G] must share N");
    }
    const std::size_t n = masks.dim(0), nm = masks.dim(1), g = targets.dim(1);
    const std::size_t kp1 = class_probs.dim(1);
    if (gt_classes.size() != g || class_probs.dim(0) != nm) throw DimensionError("matching_cost: size mismatch");
    const double lo = kProbabilityFloor, hi = 1.0 - kProbabilityFloor;

    // BCE(i, g) = −(1/N) Σ_j [t log p + (1 − t) log(1 − p)], split into
    // per-query constants and a dot product with the target.
    std::vector<double> out(nm * g, 0.0);
    std::vector<double> pos(n * nm), neg(n * nm), neg_sum(nm, 0.0), psum(nm, 0.0), tsum(g, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < nm; ++i) {
            const double p = std::clamp(masks[j * nm + i], lo, hi);
            pos[j * nm + i] = std::log(p);
            neg[j * nm + i] = std::log(1.0 - p);
            neg_sum[i] += neg[j * nm + i];
            psum[i] += masks[j * nm + i];
        }
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t s = 0; s < g; ++s) tsum[s] += targets[j * g + s];
    for (std::size_t i = 0; i < nm; ++i) {
        for (std::size_t s = 0; s < g; ++s) {
            double cross = 0.0, inter = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double t = targets[j * g + s];
                if (t == 0.0) continue;
                cross += t * (pos[j * nm + i] - neg[j * nm + i]);
                inter += t * masks[j * nm + i];
            }
            const double bce = -(cross + neg_sum[i]) / double(n);
            const double dice = 1.0 - (2.0 * inter + kDiceSmoothing) / (psum[i] + tsum[s] + kDiceSmoothing);
            const auto cls = static_cast<std::size_t>(gt_classes[s]);
            out[i * g + s] = weights.ce * bce + weights.dice * dice - weights.cls * class_probs[i * kp1 + cls];
        }
    }
    return Tensor::from({nm, g}, std::move(out));
}

GtSegments extract_segments(const LabelMap& semantic, const LabelMap& instance) {
    if (semantic.size() != instance.size()) throw DimensionError("extract_segments: map sizes differ");
    std::map<std::int32_t, std::int32_t> cls_of;
    for (std::size_t j = 0; j < instance.size(); ++j) cls_of.emplace(instance.labels[j], semantic.labels[j]);
    GtSegments out;
    std::map<std::int32_t, std::size_t> column;
    for (const auto& [id, cls] : cls_of) {
        column[id] = out.classes.size();
        out.classes.push_back(cls);
        out.instance_ids.push_back(id);
    }
    const std::size_t g = out.classes.size();
    std::vector<double> masks(instance.size() * g, 0.0);
    for (std::size_t j = 0; j < instance.size(); ++j) masks[j * g + column[instance.labels[j]]] = 1.0;
    out.masks = Tensor::from({instance.size(), g}, std::move(masks));
    return out;
}

} // namespace hcseg
