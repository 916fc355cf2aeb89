#include "hcseg/clustering.hpp"

#include <algorithm>
#include <cmath>

namespace hcseg {

using detail::make_output;
using detail::record;
using detail::tracking;
using detail::wants_grad;

std::shared_ptr<const WindowTable> WindowTable::build(GridShape fine, GridShape coarse) {
    if (fine.height != 2 * coarse.height || fine.width != 2 * coarse.width || coarse.size() == 0) {
        throw DimensionError("WindowTable: fine grid " + std::to_string(fine.height) + "x" +
                             std::to_string(fine.width) + " is not twice the coarse grid " +
                             std::to_string(coarse.height) + "x" + std::to_string(coarse.width));
    }
    auto table = std::make_shared<WindowTable>();
    table->fine = fine;
    table->coarse = coarse;
    const std::size_t n = fine.size();
    table->neighbor.assign(n * kSlots, -1);
    table->valid.assign(n * kSlots, 0);
    for (std::size_t h = 0; h < fine.height; ++h) {
        for (std::size_t w = 0; w < fine.width; ++w) {
            const std::size_t row = h * fine.width + w;
            const auto ph = static_cast<std::int64_t>(h / 2);
            const auto pw = static_cast<std::int64_t>(w / 2);
            std::size_t slot = 0;
            for (std::int64_t dy = -1; dy <= 1; ++dy) {
                for (std::int64_t dx = -1; dx <= 1; ++dx, ++slot) {
                    const std::int64_t ch = ph + dy, cw = pw + dx;
                    if (ch < 0 || cw < 0 || ch >= static_cast<std::int64_t>(coarse.height) ||
                        cw >= static_cast<std::int64_t>(coarse.width)) {
                        continue;
                    }
                    table->neighbor[row * kSlots + slot] = ch * static_cast<std::int64_t>(coarse.width) + cw;
                    table->valid[row * kSlots + slot] = 1;
                }
            }
        }
    }
    return table;
}

std::size_t WindowTable::candidates(std::size_t fine_index) const {
    return static_cast<std::size_t>(
        std::count(valid.begin() + fine_index * kSlots, valid.begin() + (fine_index + 1) * kSlots, 1));
}

Tensor window_similarity(const Tensor& q, const Tensor& k, const WindowTable& table) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(0) != k.dim(0)) {
        throw DimensionError("window_similarity: q and k must be [C×N] and [C×N_d] with equal C");
    }
    const std::size_t c = q.dim(0), n = q.dim(1), nd = k.dim(1);
    if (n != table.fine.size() || nd != table.coarse.size()) {
        throw DimensionError("window_similarity: pixel counts do not match the window table");
    }
    constexpr std::size_t S = WindowTable::kSlots;
    std::vector<double> out(n * S, 0.0);
    const auto qd = q.data();
    const auto kd = k.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* qr = qd.data() + ch * n;
        const double* kr = kd.data() + ch * nd;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t s = 0; s < S; ++s) {
                const std::int64_t j = table.neighbor[i * S + s];
                if (j >= 0) out[i * S + s] += qr[i] * kr[j];
            }
        }
    }
    const bool track = tracking({&q, &k});
    Tensor result = make_output({n, S}, std::move(out), track, "window_similarity");
    if (track) {
        auto qi = q.impl(), ki = k.impl(), oi = result.impl();
        std::vector<std::int64_t> nb = table.neighbor;
        record({qi, ki}, result, [qi, ki, oi, c, n, nd, nb = std::move(nb)] {
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::int64_t j = nb[i * S + s];
                        if (j < 0) continue;
                        const double g = oi->grad[i * S + s];
                        if (wants_grad(qi)) qi->grad[ch * n + i] += g * ki->data[ch * nd + j];
                        if (wants_grad(ki)) ki->grad[ch * nd + j] += g * qi->data[ch * n + i];
                    }
                }
            }
        });
    }
    return result;
}

Tensor window_mix(const Tensor& weights, const WindowTable& table, const Tensor& m) {
    constexpr std::size_t S = WindowTable::kSlots;
    if (weights.rank() != 2 || weights.dim(1) != S || weights.dim(0) != table.fine.size()) {
        throw DimensionError("window_mix: weights must be [N×9] for the window table");
    }
    if (m.rank() != 2 || m.dim(0) != table.coarse.size()) {
        throw DimensionError("window_mix: mask stack has " + shape_str(m.shape()) + ", expected " +
                             std::to_string(table.coarse.size()) + " rows");
    }
    const std::size_t n = weights.dim(0), cols = m.dim(1);
    std::vector<double> out(n * cols, 0.0);
    const auto wd = weights.data();
    const auto md = m.data();
    for (std::size_t i = 0; i < n; ++i) {
        double* o = out.data() + i * cols;
        for (std::size_t s = 0; s < S; ++s) {
            const std::int64_t j = table.neighbor[i * S + s];
            if (j < 0) continue;
            const double w = wd[i * S + s];
            const double* mr = md.data() + static_cast<std::size_t>(j) * cols;
            for (std::size_t c = 0; c < cols; ++c) o[c] += w * mr[c];
        }
    }
    const bool track = tracking({&weights, &m});
    Tensor result = make_output({n, cols}, std::move(out), track, "window_mix");
    if (track) {
        auto wi = weights.impl(), mi = m.impl(), oi = result.impl();
        std::vector<std::int64_t> nb = table.neighbor;
        record({wi, mi}, result, [wi, mi, oi, n, cols, nb = std::move(nb)] {
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = oi->grad.data() + i * cols;
                for (std::size_t s = 0; s < S; ++s) {
                    const std::int64_t j = nb[i * S + s];
                    if (j < 0) continue;
                    const std::size_t row = static_cast<std::size_t>(j) * cols;
                    if (wants_grad(wi)) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) acc += g[c] * mi->data[row + c];
                        wi->grad[i * S + s] += acc;
                    }
                    if (wants_grad(mi)) {
                        const double w = wi->data[i * S + s];
                        for (std::size_t c = 0; c < cols; ++c) mi->grad[row + c] += w * g[c];
                    }
                }
            }
        });
    }
    return result;
}

Tensor window_to_dense(const Tensor& weights, const WindowTable& table) {
    constexpr std::size_t S = WindowTable::kSlots;
    if (weights.rank() != 2 || weights.dim(1) != S || weights.dim(0) != table.fine.size()) {
        throw DimensionError("window_to_dense: weights must be [N×9] for the window table");
    }
    const std::size_t n = table.fine.size(), nd = table.coarse.size();
    std::vector<double> out(n * nd, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < S; ++s) {
            const std::int64_t j = table.neighbor[i * S + s];
            if (j >= 0) out[i * nd + static_cast<std::size_t>(j)] += weights[i * S + s];
        }
    const bool track = tracking({&weights});
    Tensor result = make_output({n, nd}, std::move(out), track, "window_to_dense");
    if (track) {
        auto wi = weights.impl(), oi = result.impl();
        std::vector<std::int64_t> nb = table.neighbor;
        record({wi}, result, [wi, oi, n, nd, nb = std::move(nb)] {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t s = 0; s < S; ++s) {
                    const std::int64_t j = nb[i * S + s];
                    if (j >= 0) wi->grad[i * S + s] += oi->grad[i * nd + static_cast<std::size_t>(j)];
                }
        });
    }
    return result;
}

std::size_t AssignmentMatrix::cols() const {
    return layout == AssignmentLayout::dense ? weights.dim(1) : window->coarse.size();
}

Tensor AssignmentMatrix::to_dense() const {
    return layout == AssignmentLayout::dense ? weights : window_to_dense(weights, *window);
}

ClusteringModuleParams make_clustering_params(ParameterSet& store, const std::string& prefix, std::size_t c_pre,
                                              std::size_t c_post, std::size_t c_f, double scale_init) {
    ClusteringModuleParams p;
    p.ln_q.gain = store.create(prefix + ".ln_q.gain", {c_pre}, Init::ones, 0.0, false);
    p.ln_q.bias = store.create(prefix + ".ln_q.bias", {c_pre}, Init::zeros, 0.0, false);
    p.ln_k.gain = store.create(prefix + ".ln_k.gain", {c_post}, Init::ones, 0.0, false);
    p.ln_k.bias = store.create(prefix + ".ln_k.bias", {c_post}, Init::zeros, 0.0, false);
    p.proj_q.weight =
        store.create(prefix + ".proj_q.weight", {c_f, c_pre}, Init::normal, 1.0 / std::sqrt(double(c_pre)));
    p.proj_q.bias = store.create(prefix + ".proj_q.bias", {c_f}, Init::zeros, 0.0, false);
    p.proj_k.weight =
        store.create(prefix + ".proj_k.weight", {c_f, c_post}, Init::normal, 1.0 / std::sqrt(double(c_post)));
    p.proj_k.bias = store.create(prefix + ".proj_k.bias", {c_f}, Init::zeros, 0.0, false);
    p.scale = store.create(prefix + ".scale", {1}, Init::constant, scale_init, false);
    return p;
}

namespace {

Tensor project_branch(const Tensor& f, const LayerNormParams& ln, const ProjectionParams& proj) {
    Tensor x = layer_norm(f, ln.gain, ln.bias);
    x = add_channel_bias(matmul(proj.weight, x), proj.bias);
    return l2_normalize_columns(x);
}

void check_qk(const Tensor& q, const Tensor& k, const char* op) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(0) != k.dim(0)) {
        throw DimensionError(std::string(op) + ": q and k must be [C×N], [C×N_d] with equal C, got " +
                             shape_str(q.shape()) + " and " + shape_str(k.shape()));
    }
    if (q.dim(1) != 4 * k.dim(1)) {
        throw DimensionError(std::string(op) + ": N must be 4·N_d, got N=" + std::to_string(q.dim(1)) +
                             " N_d=" + std::to_string(k.dim(1)));
    }
#ifndef NDEBUG
    for (const Tensor* t : {&q, &k}) {
        const std::size_t c = t->dim(0), n = t->dim(1);
        for (std::size_t j = 0; j < n; ++j) {
            double ss = 0.0;
            for (std::size_t i = 0; i < c; ++i) ss += (*t)[i * n + j] * (*t)[i * n + j];
            if (std::fabs(std::sqrt(ss) - 1.0) > 1e-6 && ss > 0.0) {
                throw ContractError(std::string(op) + ": columns must have unit norm");
            }
        }
    }
#endif
}

GridShape default_fine(const Tensor& q, GridShape fine) { return fine.size() ? fine : GridShape{1, q.dim(1)}; }

} // namespace

std::pair<Tensor, Tensor> project_features(const Tensor& f_pre, const Tensor& f_post,
                                           const ClusteringModuleParams& params) {
    if (f_pre.rank() != 2 || f_post.rank() != 2) throw DimensionError("project_features: expects [C×N] inputs");
    if (f_pre.dim(1) != 4 * f_post.dim(1)) {
        throw DimensionError("project_features: N=" + std::to_string(f_pre.dim(1)) + " is not 4·N_d=" +
                             std::to_string(4 * f_post.dim(1)));
    }
    if (params.proj_q.weight.dim(0) != params.proj_k.weight.dim(0)) {
        throw DimensionError("project_features: q and k projections differ in output channels");
    }
    return {project_branch(f_pre, params.ln_q, params.proj_q), project_branch(f_post, params.ln_k, params.proj_k)};
}

AssignmentMatrix compute_assignment_dense(const Tensor& q, const Tensor& k, double scale, GridShape fine,
                                          GridShape coarse, int level) {
    check_qk(q, k, "compute_assignment_dense");
    AssignmentMatrix a;
    a.level = level;
    a.layout = AssignmentLayout::dense;
    a.fine_shape = default_fine(q, fine);
    a.coarse_shape = coarse.size() ? coarse : GridShape{1, k.dim(1)};
    a.scale_clamped = std::fabs(scale) < kScaleFloor;
    a.weights = softmax_rows(matmul_tn(q, k), std::max(std::fabs(scale), kScaleFloor));
    return a;
}

AssignmentMatrix compute_assignment_dense(const Tensor& q, const Tensor& k, const Tensor& scale, GridShape fine,
                                          GridShape coarse, int level) {
    check_qk(q, k, "compute_assignment_dense");
    AssignmentMatrix a;
    a.level = level;
    a.layout = AssignmentLayout::dense;
    a.fine_shape = default_fine(q, fine);
    a.coarse_shape = coarse.size() ? coarse : GridShape{1, k.dim(1)};
    a.scale_clamped = std::fabs(scale[0]) < kScaleFloor;
    a.weights = softmax_rows(divide_by_abs_scale(matmul_tn(q, k), scale, kScaleFloor), 1.0);
    return a;
}

AssignmentMatrix compute_assignment_local(const Tensor& q, const Tensor& k, double scale, GridShape fine,
                                          GridShape coarse, int level) {
    return compute_assignment_local(q, k, Tensor::scalar(scale), fine, coarse, level);
}

AssignmentMatrix compute_assignment_local(const Tensor& q, const Tensor& k, const Tensor& scale, GridShape fine,
                                          GridShape coarse, int level) {
    auto table = WindowTable::build(fine, coarse);
    check_qk(q, k, "compute_assignment_local");
    if (q.dim(1) != fine.size() || k.dim(1) != coarse.size()) {
        throw DimensionError("compute_assignment_local: feature pixel counts do not match the grids");
    }
    AssignmentMatrix a;
    a.level = level;
    a.layout = AssignmentLayout::windowed;
    a.fine_shape = fine;
    a.coarse_shape = coarse;
    a.window = table;
    a.scale_clamped = std::fabs(scale[0]) < kScaleFloor;
    Tensor logits = divide_by_abs_scale(window_similarity(q, k, *table), scale, kScaleFloor);
    a.weights = masked_softmax_rows(logits, table->valid);
    return a;
}

AssignmentMatrix harden_assignment(const AssignmentMatrix& a) {
    AssignmentMatrix hard = a;
    const std::size_t n = a.weights.dim(0), m = a.weights.dim(1);
    std::vector<double> out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = m;
        for (std::size_t j = 0; j < m; ++j) {
            if (a.layout == AssignmentLayout::windowed && !a.window->valid[i * m + j]) continue;
            // strict > keeps the first (lowest coarse index) of tied maxima
            if (best == m || a.weights[i * m + j] > a.weights[i * m + best]) best = j;
        }
        out[i * m + best] = 1.0;
    }
    hard.weights = Tensor::from(a.weights.shape(), std::move(out));
    return hard;
}

double assignment_entropy(const AssignmentMatrix& a) {
    const std::size_t n = a.weights.dim(0), m = a.weights.dim(1);
    if (n == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double h = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double p = a.weights[i * m + j];
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(n);
}

double max_row_sum_error(const AssignmentMatrix& a) {
    const std::size_t n = a.weights.dim(0), m = a.weights.dim(1);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += a.weights[i * m + j];
        worst = std::max(worst, std::fabs(s - 1.0));
    }
    return worst;
}

} // namespace hcseg
