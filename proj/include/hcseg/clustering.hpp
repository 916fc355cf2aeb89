#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "hcseg/params.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

struct GridShape {
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const { return height * width; }
    GridShape halved() const { return {height / 2, width / 2}; }
    bool operator==(const GridShape&) const = default;
};

// Smallest |s| used inside the clustering softmax.
inline constexpr double kScaleFloor = 1e-4;

// Candidate table for windowed (local) clustering. Fine pixel (h, w) may only
// join coarse pixels in the 3×3 neighborhood of (h/2, w/2); neighbors outside
// the coarse grid are dropped. Slots are ordered by (dy, dx) row-major, which
// is ascending coarse index.
struct WindowTable {
    static constexpr std::size_t kSlots = 9;

    GridShape fine;
    GridShape coarse;
    std::vector<std::int64_t> neighbor; // [N × 9], -1 for clipped slots
    std::vector<std::uint8_t> valid;    // [N × 9]

    // Throws DimensionError unless fine is exactly twice coarse in each axis.
    static std::shared_ptr<const WindowTable> build(GridShape fine, GridShape coarse);
    std::size_t candidates(std::size_t fine_index) const;
};

// logits[n, s] = <q[:, n], k[:, neighbor(n, s)]>, 0 for clipped slots.
Tensor window_similarity(const Tensor& q, const Tensor& k, const WindowTable& table);
// out[n, :] = Σ_s weights[n, s] · m[neighbor(n, s), :]
Tensor window_mix(const Tensor& weights, const WindowTable& table, const Tensor& m);
// Scatter [N × 9] window weights into a dense [N × N_d] matrix.
Tensor window_to_dense(const Tensor& weights, const WindowTable& table);

enum class AssignmentLayout { dense, windowed };

// Row-stochastic map from the fine grid of downsampling level `level` to the
// prototypes (post-downsample pixels) of the coarse grid.
struct AssignmentMatrix {
    int level = 0;
    AssignmentLayout layout = AssignmentLayout::dense;
    GridShape fine_shape;
    GridShape coarse_shape;
    Tensor weights; // dense: [N × N_d]; windowed: [N × 9]
    std::shared_ptr<const WindowTable> window;
    bool scale_clamped = false; // |s| fell below kScaleFloor

    std::size_t rows() const { return weights.dim(0); }
    std::size_t cols() const;
    // Dense [N × N_d] view; differentiable for the windowed layout.
    Tensor to_dense() const;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct ProjectionParams {
    Tensor weight; // [C_F × C_in]
    Tensor bias;   // [C_F]
};

// One clustering module. The q branch (pre-downsample pixels) and the k
// branch (prototypes) have independent weights. `scale` is stored signed.
struct ClusteringModuleParams {
    LayerNormParams ln_q;
    LayerNormParams ln_k;
    ProjectionParams proj_q;
    ProjectionParams proj_k;
    Tensor scale;

    std::size_t feature_channels() const { return proj_q.weight.dim(0); }
};

ClusteringModuleParams make_clustering_params(ParameterSet& store, const std::string& prefix, std::size_t c_pre,
                                              std::size_t c_post, std::size_t c_f, double scale_init);

// LayerNorm → 1×1 projection → unit-norm columns, per branch.
// f_pre: [C × N], f_post: [C' × N_d] with N = 4·N_d.
std::pair<Tensor, Tensor> project_features(const Tensor& f_pre, const Tensor& f_post,
                                           const ClusteringModuleParams& params);

// A = softmax_rows(qᵀk / max(|s|, kScaleFloor)).
AssignmentMatrix compute_assignment_dense(const Tensor& q, const Tensor& k, double scale, GridShape fine = {},
                                          GridShape coarse = {}, int level = 0);
AssignmentMatrix compute_assignment_dense(const Tensor& q, const Tensor& k, const Tensor& scale, GridShape fine = {},
                                          GridShape coarse = {}, int level = 0);

AssignmentMatrix compute_assignment_local(const Tensor& q, const Tensor& k, double scale, GridShape fine,
                                          GridShape coarse, int level = 0);
AssignmentMatrix compute_assignment_local(const Tensor& q, const Tensor& k, const Tensor& scale, GridShape fine,
                                          GridShape coarse, int level = 0);

// One-hot at each row's maximum; ties go to the lowest coarse index.
AssignmentMatrix harden_assignment(const AssignmentMatrix& a);

// Mean Shannon entropy of the rows, in nats.
double assignment_entropy(const AssignmentMatrix& a);

// Row-sum deviation from 1, max over rows.
double max_row_sum_error(const AssignmentMatrix& a);

} // namespace hcseg
