#include <cmath>
#include <random>

#include "doctest.h"
#include "hcseg/clustering.hpp"
#include "oracles.hpp"

using namespace hcseg;

namespace {

Tensor window_mask_dense(GridShape fine, GridShape coarse) {
    std::vector<double> m(fine.size() * coarse.size());
    for (std::size_t n = 0; n < fine.size(); ++n)
        for (std::size_t c = 0; c < coarse.size(); ++c) m[n * coarse.size() + c] = oracle::in_window(n, c, fine, coarse);
    return Tensor::from({fine.size(), coarse.size()}, m);
}

double max_diff(const Tensor& a, const oracle::Matrix& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i)
        for (std::size_t j = 0; j < b[i].size(); ++j) d = std::max(d, std::fabs(a.at(i, j) - b[i][j]));
    return d;
}

} // namespace

TEST_CASE("window table clips at borders") {
    const auto t = WindowTable::build({4, 4}, {2, 2});
    CHECK(t->candidates(0) == 4);
    for (std::size_t n = 0; n < 16; ++n) CHECK(t->candidates(n) == 4);
    const auto big = WindowTable::build({8, 8}, {4, 4});
    CHECK(big->candidates(0) == 4);             // corner
    CHECK(big->candidates(2) == 6);             // top edge
    CHECK(big->candidates(2 * 8 + 2) == 9);     // interior
    // slots ascend in coarse index
    for (std::size_t n = 0; n < 64; ++n) {
        std::int64_t prev = -1;
        for (std::size_t s = 0; s < WindowTable::kSlots; ++s) {
            const std::int64_t c = big->neighbor[n * 9 + s];
            if (c < 0) continue;
            CHECK(c > prev);
            prev = c;
        }
    }
    CHECK_THROWS_AS(WindowTable::build({8, 8}, {3, 4}), DimensionError);
}

TEST_CASE("dense assignment examples") {
    // identical prototypes → uniform rows
    const Tensor q = Tensor::from({1, 4}, {1, 1, 1, 1});
    const Tensor k = Tensor::from({1, 1}, {1});
    const AssignmentMatrix a = compute_assignment_dense(q, k, 0.1);
    for (double v : a.weights.data()) CHECK(v == doctest::Approx(1.0));

    // orthogonal basis, tiny scale → near one-hot
    std::vector<double> qd(2 * 8, 0.0), kd(2 * 2, 0.0);
    for (std::size_t n = 0; n < 8; ++n) qd[(n % 2) * 8 + n] = 1.0;
    kd[0 * 2 + 0] = 1.0;
    kd[1 * 2 + 1] = 1.0;
    const AssignmentMatrix h = compute_assignment_dense(Tensor::from({2, 8}, qd), Tensor::from({2, 2}, kd), 1e-3);
    for (std::size_t n = 0; n < 8; ++n) CHECK(h.weights.at(n, n % 2) == doctest::Approx(1.0));

    CHECK_THROWS_AS(compute_assignment_dense(Tensor::zeros({2, 8}), Tensor::zeros({3, 2}), 0.1), DimensionError);
    CHECK_THROWS_AS(compute_assignment_dense(Tensor::zeros({2, 7}), Tensor::zeros({2, 2}), 0.1), DimensionError);
}

TEST_CASE("scale is clamped below the floor") {
    std::mt19937_64 rng(5);
    const Tensor q = oracle::random_unit_columns(rng, 4, 16), k = oracle::random_unit_columns(rng, 4, 4);
    const AssignmentMatrix zero = compute_assignment_dense(q, k, 0.0);
    const AssignmentMatrix floor = compute_assignment_dense(q, k, kScaleFloor);
    CHECK(zero.scale_clamped);
    for (std::size_t i = 0; i < zero.weights.numel(); ++i) CHECK(zero.weights[i] == floor.weights[i]);
    const AssignmentMatrix neg = compute_assignment_dense(q, k, -0.3);
    const AssignmentMatrix pos = compute_assignment_dense(q, k, 0.3);
    for (std::size_t i = 0; i < neg.weights.numel(); ++i) CHECK(neg.weights[i] == pos.weights[i]);
}

TEST_CASE("dense assignment matches the loop oracle and is row-stochastic") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const GridShape coarse{1 + rng() % 4, 1 + rng() % 4};
        const GridShape fine{coarse.height * 2, coarse.width * 2};
        const Tensor q = oracle::random_unit_columns(rng, 5, fine.size());
        const Tensor k = oracle::random_unit_columns(rng, 5, coarse.size());
        const double s = 0.05 + 0.5 * double(rng() % 100) / 100.0;
        const AssignmentMatrix a = compute_assignment_dense(q, k, s, fine, coarse);
        CHECK(max_diff(a.weights, oracle::assignment(q, k, s, fine, coarse, false)) < 1e-12);
        CHECK(max_row_sum_error(a) < 1e-12);
    }
}

TEST_CASE("local assignment equals masked dense assignment") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        const GridShape coarse{1 + rng() % 6, 1 + rng() % 6};
        const GridShape fine{coarse.height * 2, coarse.width * 2};
        const Tensor q = oracle::random_unit_columns(rng, 4, fine.size());
        const Tensor k = oracle::random_unit_columns(rng, 4, coarse.size());
        const double s = 0.02 + double(rng() % 100) / 100.0;
        const AssignmentMatrix local = compute_assignment_local(q, k, s, fine, coarse);
        CHECK(local.layout == AssignmentLayout::windowed);
        CHECK(local.cols() == coarse.size());

        const Tensor mask = window_mask_dense(fine, coarse);
        std::vector<std::uint8_t> m(mask.numel());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] != 0.0;
        const Tensor dense = masked_softmax_rows(scale(matmul_tn(q, k), 1.0 / s), m);
        const Tensor ld = local.to_dense();
        double d = 0.0;
        for (std::size_t i = 0; i < ld.numel(); ++i) d = std::max(d, std::fabs(ld[i] - dense[i]));
        CHECK(d <= 1e-10);
        CHECK(max_diff(ld, oracle::assignment(q, k, s, fine, coarse, true)) <= 1e-10);
        CHECK(max_row_sum_error(local) < 1e-12);
    }
}

TEST_CASE("local assignment rejects mismatched grids") {
    std::mt19937_64 rng(8);
    const Tensor q = oracle::random_unit_columns(rng, 3, 16), k = oracle::random_unit_columns(rng, 3, 4);
    CHECK_THROWS_AS(compute_assignment_local(q, k, 0.1, {4, 4}, {2, 3}), DimensionError);
    CHECK_THROWS_AS(compute_assignment_local(q, k, 0.1, {2, 8}, {2, 2}), DimensionError);
}

TEST_CASE("harden_assignment picks the row maximum with lowest-index ties") {
    AssignmentMatrix a;
    a.weights = Tensor::from({3, 3}, {0.2, 0.5, 0.3, 0.4, 0.2, 0.4, 1.0 / 3, 1.0 / 3, 1.0 / 3});
    a.fine_shape = {1, 3};
    a.coarse_shape = {1, 3};
    const AssignmentMatrix h = harden_assignment(a);
    const std::vector<double> want = {0, 1, 0, 1, 0, 0, 1, 0, 0};
    for (std::size_t i = 0; i < 9; ++i) CHECK(h.weights[i] == want[i]);
    const AssignmentMatrix hh = harden_assignment(h);
    for (std::size_t i = 0; i < 9; ++i) CHECK(hh.weights[i] == h.weights[i]);
}

TEST_CASE("hard limit: small scale recovers the argmax clustering") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const GridShape coarse{2 + rng() % 3, 2 + rng() % 3};
        const GridShape fine{coarse.height * 2, coarse.width * 2};
        const Tensor q = oracle::random_unit_columns(rng, 6, fine.size());
        const Tensor k = oracle::random_unit_columns(rng, 6, coarse.size());
        const AssignmentMatrix soft = compute_assignment_local(q, k, 1e-3, fine, coarse);
        const std::vector<std::size_t> want = oracle::argmax_assignment(q, k, fine, coarse, true);
        const Tensor hard = harden_assignment(soft).to_dense();
        for (std::size_t n = 0; n < fine.size(); ++n) CHECK(hard.at(n, want[n]) == 1.0);
    }
}

TEST_CASE("assignment entropy examples") {
    AssignmentMatrix onehot;
    onehot.weights = Tensor::from({2, 2}, {1, 0, 0, 1});
    CHECK(assignment_entropy(onehot) == 0.0);
    AssignmentMatrix uniform;
    uniform.weights = Tensor::full({3, 4}, 0.25);
    CHECK(assignment_entropy(uniform) == doctest::Approx(std::log(4.0)));
    // interior windowed row with all-equal logits → ln 9
    const Tensor q = Tensor::full({1, 64}, 1.0), k = Tensor::full({1, 16}, 1.0);
    const AssignmentMatrix w = compute_assignment_local(q, k, 0.1, {8, 8}, {4, 4});
    AssignmentMatrix row = w;
    row.weights = gather_columns(transpose(w.weights), std::vector<std::size_t>{2 * 8 + 2});
    row.weights = transpose(row.weights);
    CHECK(assignment_entropy(row) == doctest::Approx(std::log(9.0)));
}

TEST_CASE("entropy decreases as the scale shrinks") {
    std::mt19937_64 rng(10);
    const Tensor q = oracle::random_unit_columns(rng, 4, 64), k = oracle::random_unit_columns(rng, 4, 16);
    double prev = 1e9;
    for (double s : {1.0, 0.3, 0.1, 0.03, 0.01}) {
        const double h = assignment_entropy(compute_assignment_local(q, k, s, {8, 8}, {4, 4}));
        CHECK(h < prev);
        prev = h;
    }
}

TEST_CASE("project_features emits unit columns") {
    std::mt19937_64 rng(11);
    ParameterSet store(3);
    const ClusteringModuleParams p = make_clustering_params(store, "c", 5, 7, 4, 0.1);
    CHECK(p.scale.item() == doctest::Approx(0.1));
    const auto [q, k] = project_features(oracle::random_tensor(rng, {5, 16}), oracle::random_tensor(rng, {7, 4}), p);
    CHECK(q.shape() == Shape{4, 16});
    CHECK(k.shape() == Shape{4, 4});
    for (std::size_t j = 0; j < 16; ++j) {
        double ss = 0.0;
        for (std::size_t c = 0; c < 4; ++c) ss += q.at(c, j) * q.at(c, j);
        CHECK(ss == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(project_features(oracle::random_tensor(rng, {5, 15}), oracle::random_tensor(rng, {7, 4}), p),
                    DimensionError);
}

TEST_CASE("assignment gradients match finite differences") {
    std::mt19937_64 rng(12);
    const GridShape fine{6, 4}, coarse{3, 2};
    const Tensor q = oracle::random_unit_columns(rng, 3, fine.size());
    const Tensor k = oracle::random_unit_columns(rng, 3, coarse.size());
    const Tensor s = Tensor::from({1}, {0.35});
    const Tensor wd = oracle::random_tensor(rng, {fine.size(), coarse.size()});
    const Tensor ww = oracle::random_tensor(rng, {fine.size(), 9});
    const double tol = 1e-5;

    const auto dense_q = [&](const Tensor& x) { return sum(mul(compute_assignment_dense(x, k, s, fine, coarse).weights, wd)); };
    const auto dense_k = [&](const Tensor& x) { return sum(mul(compute_assignment_dense(q, x, s, fine, coarse).weights, wd)); };
    const auto dense_s = [&](const Tensor& x) { return sum(mul(compute_assignment_dense(q, k, x, fine, coarse).weights, wd)); };
    const auto local_q = [&](const Tensor& x) { return sum(mul(compute_assignment_local(x, k, s, fine, coarse).weights, ww)); };
    const auto local_k = [&](const Tensor& x) { return sum(mul(compute_assignment_local(q, x, s, fine, coarse).weights, ww)); };
    const auto local_s = [&](const Tensor& x) { return sum(mul(compute_assignment_local(q, k, x, fine, coarse).weights, ww)); };
    const auto local_dense = [&](const Tensor& x) {
        return sum(mul(compute_assignment_local(x, k, s, fine, coarse).to_dense(), wd));
    };
    CHECK(oracle::gradient_error(dense_q, q) < tol);
    CHECK(oracle::gradient_error(dense_k, k) < tol);
    CHECK(oracle::gradient_error(dense_s, s) < tol);
    CHECK(oracle::gradient_error(local_q, q) < tol);
    CHECK(oracle::gradient_error(local_k, k) < tol);
    CHECK(oracle::gradient_error(local_s, s) < tol);
    CHECK(oracle::gradient_error(local_dense, q) < tol);

    ParameterSet store(1);
    const ClusteringModuleParams p = make_clustering_params(store, "g", 3, 3, 3, 0.1);
    const Tensor fpre = oracle::random_tensor(rng, {3, fine.size()}), fpost = oracle::random_tensor(rng, {3, coarse.size()});
    const auto through_projection = [&](const Tensor& x) {
        const auto [qq, kk] = project_features(x, fpost, p);
        return sum(mul(compute_assignment_local(qq, kk, p.scale, fine, coarse).weights, ww));
    };
    CHECK(oracle::gradient_error(through_projection, fpre) < tol);
}
