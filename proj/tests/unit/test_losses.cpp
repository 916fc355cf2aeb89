#include <cmath>
#include <random>

#include "doctest.h"
#include "hcseg/losses.hpp"
#include "hcseg/training.hpp"
#include "oracles.hpp"

using namespace hcseg;

TEST_CASE("bce examples") {
    const double eps = 1e-3;
    const Tensor p = Tensor::from({2, 1}, {eps, 1 - eps});
    const Tensor t = Tensor::from({2, 1}, {0, 1});
    CHECK(bce_mask_loss(p, t).item() == doctest::Approx(-std::log(1 - eps)));
    const Tensor half = Tensor::full({3, 2}, 0.5);
    CHECK(bce_mask_loss(half, Tensor::from({3, 2}, {0, 1, 1, 0, 1, 1})).item() == doctest::Approx(std::log(2.0)));
    std::mt19937_64 rng(1);
    const Tensor pr = sigmoid(oracle::random_tensor(rng, {7, 3}, -4, 4));
    const Tensor tg = Tensor::from({7, 3}, std::vector<double>(21, 1.0));
    CHECK(bce_mask_loss(pr, tg).item() == doctest::Approx(oracle::bce(oracle::to_matrix(pr), oracle::to_matrix(tg))));
    CHECK_THROWS_AS(bce_mask_loss(half, Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("dice examples") {
    const Tensor m = Tensor::from({4, 1}, {1, 1, 0, 0});
    CHECK(dice_loss(m, m).item() == doctest::Approx(0.0));
    const Tensor disjoint = Tensor::from({4, 1}, {0, 0, 1, 1});
    CHECK(dice_loss(disjoint, m, 0.0).item() == doctest::Approx(1.0));
    CHECK(dice_loss(disjoint, m).item() > 0.75);
    const Tensor half = Tensor::from({4, 1}, {1, 0, 1, 0});
    CHECK(dice_loss(half, m, 0.0).item() == doctest::Approx(0.5));
    std::mt19937_64 rng(2);
    const Tensor pr = sigmoid(oracle::random_tensor(rng, {9, 2}, -3, 3));
    const Tensor tg = Tensor::from({9, 2}, {1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 0, 1, 1, 1, 0, 0});
    CHECK(dice_loss(pr, tg).item() ==
          doctest::Approx(oracle::dice(oracle::to_matrix(pr), oracle::to_matrix(tg), 1.0)).epsilon(1e-12));
    CHECK_THROWS_AS(dice_loss(m, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("classification loss examples") {
    MatchResult match;
    match.pairs = {{0, 0}, {1, 1}};
    match.unmatched = {2};
    const std::vector<std::int32_t> classes = {2, 0};
    const Tensor onehot = Tensor::from({3, 4}, {0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1});
    CHECK(classification_loss(onehot, match, classes, 0.1).item() == doctest::Approx(0.0).epsilon(1e-5));
    const Tensor uniform = Tensor::full({3, 4}, 0.25);
    CHECK(classification_loss(uniform, match, classes, 0.1).item() == doctest::Approx(std::log(4.0)));

    std::mt19937_64 rng(3);
    const Tensor p = softmax_rows(oracle::random_tensor(rng, {3, 4}, -2, 2), 1.0);
    const double want = -(std::log(p.at(0, 2)) + std::log(p.at(1, 0)) + 0.1 * std::log(p.at(2, 3))) / 2.1;
    CHECK(classification_loss(p, match, classes, 0.1).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("scale regularizer examples") {
    CHECK(scale_regularizer(std::vector<Tensor>{}).item() == 0.0);
    const std::vector<Tensor> zeros = {Tensor::from({1}, {0}), Tensor::from({1}, {0})};
    CHECK(scale_regularizer(zeros).item() == 0.0);
    const std::vector<Tensor> s = {Tensor::from({1}, {0.1}), Tensor::from({1}, {-0.2}), Tensor::from({1}, {0.3})};
    CHECK(scale_regularizer(s).item() == doctest::Approx(0.6));
    const double g = oracle::gradient_error(
        [](const Tensor& x) {
            const std::vector<Tensor> one = {x};
            return scale_regularizer(one);
        },
        Tensor::from({1}, {0.1}));
    CHECK(g < 1e-8);
    Tensor x = Tensor::from({1}, {0.1}, true);
    Tape tape;
    TapeScope scope(tape);
    const std::vector<Tensor> one = {x};
    tape.backward(scale_regularizer(one));
    CHECK(x.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("regularizer contribution shrinks with |s|") {
    double prev = 1e9;
    for (double s : {0.5, 0.2, -0.1, 0.05, 0.0}) {
        const std::vector<Tensor> v = {Tensor::from({1}, {s}), Tensor::from({1}, {0.1})};
        const double r = scale_regularizer(v).item();
        CHECK(r < prev);
        prev = r;
    }
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(4);
    const Tensor x = oracle::random_tensor(rng, {6, 3}, -2, 2);
    const Tensor t = Tensor::from({6, 3}, {1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0});
    CHECK(oracle::gradient_error([&](const Tensor& v) { return bce_mask_loss(sigmoid(v), t); }, x) < 1e-5);
    CHECK(oracle::gradient_error([&](const Tensor& v) { return dice_loss(sigmoid(v), t); }, x) < 1e-5);
    MatchResult match;
    match.pairs = {{1, 0}, {4, 1}};
    match.unmatched = {0, 2, 3, 5};
    const std::vector<std::int32_t> classes = {1, 0};
    CHECK(oracle::gradient_error([&](const Tensor& v) { return classification_loss(softmax_rows(v, 1.0), match, classes, 0.1); },
                                 x) < 1e-5);
    LabelMap gt(2, 3);
    gt.labels = {0, 1, 2, 2, 1, 0};
    CHECK(oracle::gradient_error([&](const Tensor& v) { return pixel_cross_entropy(softmax_rows(v, 1.0), gt); }, x) < 1e-5);
}

TEST_CASE("hungarian examples") {
    const Tensor diag = Tensor::from({3, 3}, {1, 9, 9, 9, 1, 9, 9, 9, 1});
    const MatchResult d = hungarian_match(diag);
    CHECK(d.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}});
    CHECK(d.total_cost == 3.0);
    const Tensor anti = Tensor::from({3, 3}, {5, 5, 0, 5, 0, 5, 0, 5, 5});
    const MatchResult a = hungarian_match(anti);
    CHECK(a.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {1, 1}, {2, 0}});
    const Tensor rect = Tensor::from({3, 2}, {4, 1, 2, 8, 0.5, 0.5});
    const MatchResult r = hungarian_match(rect);
    CHECK(r.pairs.size() == 2);
    CHECK(r.unmatched.size() == 1);
    CHECK(r.total_cost == doctest::Approx(1.5));
}

TEST_CASE("hungarian rejects non-finite costs") {
    Tensor c = Tensor::zeros({2, 2});
    c.mutable_data()[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(hungarian_match(c), ContractError);
}

TEST_CASE("hungarian equals exhaustive search") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 6;
        const Tensor cost = trial % 3 == 0 ? Tensor::from({r, c}, [&] {
            std::vector<double> v(r * c);
            for (double& x : v) x = double(rng() % 4); // many ties
            return v;
        }())
                                           : oracle::random_tensor(rng, {r, c}, -5, 5);
        const MatchResult m = hungarian_match(cost);
        CHECK(m.pairs.size() == std::min(r, c));
        std::vector<char> used_q(r, 0), used_g(c, 0);
        for (auto [q, g] : m.pairs) {
            CHECK_FALSE(used_q[q]);
            CHECK_FALSE(used_g[g]);
            used_q[q] = used_g[g] = 1;
        }
        CHECK(m.total_cost == oracle::brute_force_min_cost(oracle::to_matrix(cost)));
    }
}

TEST_CASE("segments extracted from label maps") {
    LabelMap sem(2, 3), inst(2, 3);
    sem.labels = {0, 1, 1, 0, 2, 2};
    inst.labels = {0, 1, 1, 0, 2, 2};
    const GtSegments g = extract_segments(sem, inst);
    CHECK(g.classes == std::vector<std::int32_t>{0, 1, 2});
    CHECK(g.masks.shape() == Shape{6, 3});
    CHECK(g.masks.at(1, 1) == 1.0);
    CHECK(g.masks.at(4, 2) == 1.0);
    CHECK(g.masks.at(0, 0) == 1.0);
}

TEST_CASE("matching cost follows the weighted formula") {
    std::mt19937_64 rng(6);
    const Tensor masks = sigmoid(oracle::random_tensor(rng, {8, 3}, -3, 3));
    const Tensor probs = softmax_rows(oracle::random_tensor(rng, {3, 4}), 1.0);
    const Tensor targets = Tensor::from({8, 2}, {1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0});
    const std::vector<std::int32_t> classes = {1, 2};
    LossWeights w;
    const Tensor c = matching_cost(masks, probs, targets, classes, w);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t g = 0; g < 2; ++g) {
            oracle::Matrix p(8, std::vector<double>(1)), t(8, std::vector<double>(1));
            for (std::size_t j = 0; j < 8; ++j) {
                p[j][0] = masks.at(j, i);
                t[j][0] = targets.at(j, g);
            }
            const double want = w.ce * oracle::bce(p, t) + w.dice * oracle::dice(p, t, 1.0) -
                                w.cls * probs.at(i, std::size_t(classes[g]));
            CHECK(c.at(i, g) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("adamw examples") {
    std::vector<double> p = {1.0, -2.0}, g = {0.0, 0.0}, m = {0, 0}, v = {0, 0};
    adamw_update(p, g, m, v, 1, 0.1, 0.0, 0.9, 0.999, 1e-8);
    CHECK(p == std::vector<double>{1.0, -2.0});

    p = {1.0, -2.0};
    m = v = {0, 0};
    g = {0.5, -0.25};
    adamw_update(p, g, m, v, 1, 0.01, 0.0, 0.9, 0.999, 1e-8);
    // first step: m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
    CHECK(p[0] == doctest::Approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(-2.0 + 0.01 * 0.25 / (0.25 + 1e-8)).epsilon(1e-14));

    p = {1.0, -2.0};
    m = v = {0, 0};
    g = {0, 0};
    adamw_update(p, g, m, v, 1, 0.1, 0.05, 0.9, 0.999, 1e-8);
    CHECK(p[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.05)));
    CHECK(p[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.05)));
    CHECK_THROWS_AS(adamw_update(p, std::vector<double>{1.0}, m, v, 1, 0.1, 0, 0.9, 0.999, 1e-8), DimensionError);
}

TEST_CASE("adamw skips decay on flagged parameters") {
    ParameterSet store(1);
    Tensor w = store.create("w", {2}, Init::constant, 1.0);
    Tensor b = store.create("b", {2}, Init::constant, 1.0, false);
    AdamW opt({0.1, 0.5, 0.9, 0.999, 1e-8});
    opt.step(store, 0.1);
    CHECK(w[0] == doctest::Approx(0.95));
    CHECK(b[0] == 1.0);
    CHECK(opt.steps() == 1);
}

TEST_CASE("loss weights are validated") {
    LossWeights w;
    w.ce = -1;
    CHECK_THROWS_AS(w.validate(), ContractError);
}
