#include <random>

#include "doctest.h"
#include "hcseg/backbone.hpp"
#include "oracles.hpp"

using namespace hcseg;

namespace {

BackboneConfig small_config(std::size_t level) {
    BackboneConfig c;
    c.stem_stride = 2;
    c.num_stages = 4;
    c.channels = {4, 4, 6, 6, 8};
    c.hierarchical_level = level;
    c.clustering_channels = 4;
    return c;
}

} // namespace

TEST_CASE("hook-free backbone emits no assignments") {
    const BackboneConfig cfg = small_config(0);
    ParameterSet store(1);
    const BackboneParams p = make_backbone_params(store, cfg);
    std::mt19937_64 rng(1);
    const FeaturePyramid pyr = forward_with_hooks(oracle::random_tensor(rng, {3, 64, 64}, 0, 1), p, cfg);
    CHECK(pyr.levels.empty());
    CHECK(pyr.final_grid == GridShape{2, 2});
    CHECK(pyr.final_level == 5);
    CHECK(pyr.final_features.shape() == Shape{8, 4});
}

TEST_CASE("three hooked levels on a 64x64 input") {
    const BackboneConfig cfg = small_config(3);
    ParameterSet store(1);
    const BackboneParams p = make_backbone_params(store, cfg);
    std::mt19937_64 rng(2);
    const FeaturePyramid pyr = forward_with_hooks(oracle::random_tensor(rng, {3, 64, 64}, 0, 1), p, cfg);
    REQUIRE(pyr.levels.size() == 3);
    const GridShape fine[] = {{16, 16}, {8, 8}, {4, 4}};
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(pyr.levels[i].fine == fine[i]);
        CHECK(pyr.levels[i].coarse == fine[i].halved());
        CHECK(pyr.levels[i].assignment.rows() == fine[i].size());
        CHECK(pyr.levels[i].assignment.cols() == fine[i].halved().size());
        CHECK(pyr.levels[i].level == int(i) + 2);
    }
    CHECK(pyr.final_grid == GridShape{2, 2});
}

TEST_CASE("indivisible inputs are rejected") {
    const BackboneConfig cfg = small_config(1);
    ParameterSet store(1);
    const BackboneParams p = make_backbone_params(store, cfg);
    CHECK_THROWS_AS(forward_with_hooks(Tensor::zeros({3, 48, 40}), p, cfg), DimensionError);
    CHECK_THROWS_AS(forward_with_hooks(Tensor::zeros({1, 64, 64}), p, cfg), DimensionError);
}

TEST_CASE("config validation") {
    BackboneConfig c = small_config(5);
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = small_config(1);
    c.channels.pop_back();
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = small_config(1);
    c.stem_stride = 3;
    CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("constant image gives uniform in-window assignments") {
    BackboneConfig cfg = small_config(2);
    cfg.coord_channels = false;
    cfg.layout = AssignmentLayout::windowed;
    ParameterSet store(4);
    const BackboneParams p = make_backbone_params(store, cfg);
    const FeaturePyramid pyr = forward_with_hooks(Tensor::full({3, 64, 64}, 0.5), p, cfg);
    // Zero padding breaks translation invariance at the border, so compare
    // interior rows whose whole 3×3 window sees identical features.
    const HookLevel& h = pyr.levels.front();
    const Tensor d = h.assignment.to_dense();
    const GridShape f = h.fine;
    for (std::size_t y = 4; y + 4 < f.height; ++y)
        for (std::size_t x = 4; x + 4 < f.width; ++x) {
            const std::size_t n = y * f.width + x;
            for (std::size_t c = 0; c < h.coarse.size(); ++c) {
                if (oracle::in_window(n, c, f, h.coarse)) CHECK(d.at(n, c) == doctest::Approx(1.0 / 9.0));
                else CHECK(d.at(n, c) == 0.0);
            }
        }
}

TEST_CASE("hierarchical level never changes the forward activations") {
    std::mt19937_64 rng(3);
    const Tensor img = oracle::random_tensor(rng, {3, 64, 64}, 0, 1);
    std::vector<double> reference;
    for (std::size_t level = 0; level <= 4; ++level) {
        const BackboneConfig cfg = small_config(level);
        ParameterSet store(9);
        const BackboneParams p = make_backbone_params(store, cfg);
        const FeaturePyramid pyr = forward_with_hooks(img, p, cfg);
        CHECK(pyr.levels.size() == level);
        std::vector<double> f(pyr.final_features.data().begin(), pyr.final_features.data().end());
        if (reference.empty()) reference = f;
        else CHECK(f == reference);
    }
}

TEST_CASE("backbone is deterministic per seed") {
    std::mt19937_64 rng(4);
    const Tensor img = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
    const BackboneConfig cfg = small_config(2);
    ParameterSet s1(5), s2(5), s3(6);
    const FeaturePyramid a = forward_with_hooks(img, make_backbone_params(s1, cfg), cfg);
    const FeaturePyramid b = forward_with_hooks(img, make_backbone_params(s2, cfg), cfg);
    const FeaturePyramid c = forward_with_hooks(img, make_backbone_params(s3, cfg), cfg);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& wa = a.levels[i].assignment.weights;
        const auto& wb = b.levels[i].assignment.weights;
        for (std::size_t j = 0; j < wa.numel(); ++j) CHECK(wa[j] == wb[j]);
    }
    bool differs = false;
    for (std::size_t j = 0; j < a.final_features.numel(); ++j) differs |= a.final_features[j] != c.final_features[j];
    CHECK(differs);
}

TEST_CASE("count_parameters") {
    ParameterSet empty;
    CHECK(count_parameters(empty) == 0);
    ParameterSet one;
    one.create("w", {3, 2}, Init::normal, 1.0);
    one.create("b", {3}, Init::zeros);
    CHECK(count_parameters(one) == 9);
    ParameterSet store(1);
    make_backbone_params(store, small_config(2));
    std::size_t total = 0;
    for (const auto& e : store.entries()) total += e.value.numel();
    CHECK(count_parameters(store) == total);
    CHECK_THROWS_AS(one.create("w", {1}, Init::zeros), ContractError);
}

TEST_CASE("strided_conv3 downsampling also hooks") {
    BackboneConfig cfg = small_config(2);
    cfg.downsample = DownsampleKind::strided_conv3;
    cfg.layout = AssignmentLayout::dense;
    ParameterSet store(2);
    const BackboneParams p = make_backbone_params(store, cfg);
    std::mt19937_64 rng(5);
    const FeaturePyramid pyr = forward_with_hooks(oracle::random_tensor(rng, {3, 32, 32}, 0, 1), p, cfg);
    REQUIRE(pyr.levels.size() == 2);
    CHECK(pyr.levels[0].assignment.layout == AssignmentLayout::dense);
    CHECK(max_row_sum_error(pyr.levels[0].assignment) < 1e-12);
}

TEST_CASE("extra neck convolutions keep the final grid") {
    BackboneConfig cfg = small_config(2);
    ParameterSet one(1), three(1);
    const BackboneParams p1 = make_backbone_params(one, cfg);
    cfg.neck_blocks = 3;
    const BackboneParams p3 = make_backbone_params(three, cfg);
    CHECK(p3.neck.size() == 3);
    CHECK(count_parameters(three) == count_parameters(one) + 2 * (8 * 8 * 9 + 8));
    std::mt19937_64 rng(9);
    const Tensor img = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
    const FeaturePyramid a = forward_with_hooks(img, p1, small_config(2));
    const FeaturePyramid b = forward_with_hooks(img, p3, cfg);
    CHECK(b.final_grid == a.final_grid);
    CHECK(b.final_features.shape() == a.final_features.shape());
    // hooks sit before the neck
    CHECK(b.levels.back().assignment.weights.data()[0] == a.levels.back().assignment.weights.data()[0]);
}
