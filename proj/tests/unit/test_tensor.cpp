#include <cmath>
#include <random>

#include "doctest.h"
#include "hcseg/gradcheck.hpp"
#include "hcseg/tensor.hpp"
#include "oracles.hpp"

using namespace hcseg;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("tensor factories validate shape and values") {
    CHECK(Tensor::zeros({2, 3}).numel() == 6);
    CHECK(Tensor::scalar(2.5).item() == 2.5);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), ContractError);
    CHECK_THROWS_AS(Tensor::from({1}, {INFINITY}), ContractError);
    Tensor t = Tensor::zeros({3}, true);
    CHECK(t.grad().size() == 3);
    CHECK_THROWS_AS(Tensor::zeros({2}).item(), ContractError);
}

TEST_CASE("matmul examples") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor r = matmul(a, id);
    CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});
    const Tensor p = matmul(Tensor::from({1, 3}, {1, 2, 3}), Tensor::from({3, 1}, {4, 5, 6}));
    CHECK(p.item() == 32.0);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul variants agree with the triple-loop product") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng() % 7, k = 1 + rng() % 7, n = 1 + rng() % 7;
        const Tensor a = oracle::random_tensor(rng, {m, k}), b = oracle::random_tensor(rng, {k, n});
        const Tensor want = oracle::from_matrix(oracle::matmul(oracle::to_matrix(a), oracle::to_matrix(b)));
        CHECK(max_abs_diff(matmul(a, b).data(), want.data()) < 1e-12);
        CHECK(max_abs_diff(matmul_tn(transpose(a), b).data(), want.data()) < 1e-12);
        CHECK(max_abs_diff(matmul_nt(a, transpose(b)).data(), want.data()) < 1e-12);
    }
}

TEST_CASE("softmax_rows examples") {
    const Tensor u = softmax_rows(Tensor::from({1, 2}, {0, 0}), 1.0);
    CHECK(u[0] == doctest::Approx(0.5));
    CHECK(u[1] == doctest::Approx(0.5));
    const Tensor big = softmax_rows(Tensor::from({1, 2}, {1000, 0}), 1.0);
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(big[1]));
    const Tensor sharp = softmax_rows(Tensor::from({1, 3}, {1.0, 1.1, 0.5}), 1e-3);
    CHECK(sharp[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(softmax_rows(Tensor::from({1, 2}, {0, 0}), 0.0), DomainError);
    CHECK_THROWS_AS(softmax_rows(Tensor::from({1, 2}, {0, 0}), -1.0), DomainError);
}

TEST_CASE("softmax rows lie on the simplex") {
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor(rng, {6, 5}, -30, 30);
    const Tensor y = softmax_rows(x, 0.7);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
            CHECK(y.at(r, c) >= 0.0);
            s += y.at(r, c);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("masked softmax zeroes masked entries") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 3, 2, 1});
    const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 1, 1};
    const Tensor y = masked_softmax_rows(x, mask);
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(1, 0) == 0.0);
    CHECK(y.at(0, 0) + y.at(0, 2) == doctest::Approx(1.0));
    const std::vector<std::uint8_t> empty_row = {0, 0, 0, 1, 1, 1};
    CHECK_THROWS(masked_softmax_rows(x, empty_row));
}

TEST_CASE("layer_norm examples") {
    const Tensor x = Tensor::from({2, 1}, {1, 3});
    const Tensor y = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}));
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-5));
    const Tensor c = layer_norm(Tensor::full({4, 2}, 7.0), Tensor::full({4}, 1.0), Tensor::full({4}, 0.25));
    for (double v : c.data()) CHECK(v == doctest::Approx(0.25));
    CHECK_THROWS_AS(layer_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3})), DimensionError);
}

TEST_CASE("l2_normalize_columns examples") {
    const Tensor y = l2_normalize_columns(Tensor::from({2, 2}, {3, 0, 4, 0}));
    CHECK(y.at(0, 0) == doctest::Approx(0.6));
    CHECK(y.at(1, 0) == doctest::Approx(0.8));
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(1, 1) == 0.0);
}

TEST_CASE("conv_1x1 matches channel mixing") {
    const Tensor x = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
    const Tensor w = Tensor::from({1, 2}, {1, -1});
    const Tensor y = conv_1x1(x, w, Tensor::from({1}, {0.5}));
    CHECK(y.shape() == Shape{1, 1, 2});
    CHECK(y[0] == doctest::Approx(-1.5));
    CHECK(y[1] == doctest::Approx(-1.5));
    CHECK_THROWS_AS(conv_1x1(x, Tensor::zeros({1, 3}), Tensor::zeros({1})), DimensionError);
}

TEST_CASE("strided_downsample halves the grid") {
    std::mt19937_64 rng(3);
    const Tensor x = oracle::random_tensor(rng, {3, 8, 6});
    const Tensor p = strided_downsample(x, DownsampleKind::avg_pool2);
    CHECK(p.shape() == Shape{3, 4, 3});
    CHECK(p[0] == doctest::Approx((x[0] + x[1] + x[6] + x[7]) / 4.0));
    const Tensor c = strided_downsample(x, DownsampleKind::strided_conv3, oracle::random_tensor(rng, {5, 3, 3, 3}),
                                        Tensor::zeros({5}));
    CHECK(c.shape() == Shape{5, 4, 3});
    CHECK_THROWS_AS(strided_downsample(oracle::random_tensor(rng, {1, 5, 4}), DownsampleKind::avg_pool2),
                    DimensionError);
}

TEST_CASE("backward of a sum of squares") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(square(x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward contracts") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = square(x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    tape.backward(sum(y));
    CHECK(tape.consumed());
    CHECK_THROWS_AS(sum(square(x)), ContractError);
    tape.clear();
    CHECK_NOTHROW(tape.backward(sum(square(x))));
}

TEST_CASE("matmul gradients") {
    const Tensor a = Tensor::from({1, 1}, {2}), b = Tensor::from({1, 1}, {3});
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(matmul(x, b)); }, a) < 1e-8);
    Tensor av = a.clone(), bv = b.clone();
    av.set_requires_grad(true);
    bv.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(matmul(av, bv)));
    }
    CHECK(av.grad()[0] == doctest::Approx(3.0));
    CHECK(bv.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("finite difference oracle examples") {
    const Tensor g = finite_difference_oracle([](const Tensor& x) { return x[0] * x[0]; }, Tensor::from({1}, {3}), 1e-5);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-8));
    const Tensor lin = finite_difference_oracle([](const Tensor& x) { return 2 * x[0] - x[1]; },
                                                Tensor::from({2}, {0.3, -4}), 1e-3);
    CHECK(lin[0] == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(lin[1] == doctest::Approx(-1.0).epsilon(1e-10));
    CHECK_THROWS_AS(finite_difference_oracle([](const Tensor&) { return 0.0; }, Tensor::zeros({1}), 0.0), DomainError);
}

TEST_CASE("individual op gradients match finite differences") {
    std::mt19937_64 rng(4);
    const double tol = 1e-5;
    const Tensor m34 = oracle::random_tensor(rng, {3, 4});
    const Tensor w = oracle::random_tensor(rng, {3, 4});
    const Tensor other = oracle::random_tensor(rng, {4, 2});
    const auto weighted = [&](const Tensor& y) { return sum(mul(y, w)); };

    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(square(matmul(x, other))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(square(matmul_tn(x, m34))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(square(matmul_nt(x, m34))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(transpose(transpose(x))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(softmax_rows(x, 0.3)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(sigmoid(x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(silu(x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(exp(x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(log(add_scalar(square(x), 0.5))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(abs(x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(mul(x, x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(sub(x, scale(x, 0.3))); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return mean(square(x)); }, m34) < tol);

    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1};
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(masked_softmax_rows(x, mask)); }, m34) < tol);

    const Tensor gain = oracle::random_tensor(rng, {3}), bias = oracle::random_tensor(rng, {3});
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(layer_norm(x, gain, bias)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& g) { return weighted(layer_norm(m34, g, bias)); }, gain) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(l2_normalize_columns(x)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& b) { return weighted(add_channel_bias(m34, b)); }, bias) < tol);

    const Tensor s = Tensor::from({1}, {0.4});
    CHECK(oracle::gradient_error([&](const Tensor& x) { return weighted(divide_by_abs_scale(x, s, 1e-4)); }, m34) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& sc) { return weighted(divide_by_abs_scale(m34, sc, 1e-4)); }, s) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& sc) { return weighted(divide_by_abs_scale(m34, sc, 1e-4)); },
                                 Tensor::from({1}, {-0.4})) < tol);

    const Tensor img = oracle::random_tensor(rng, {2, 4, 4});
    const Tensor kw = oracle::random_tensor(rng, {3, 2, 3, 3});
    const Tensor kb = oracle::random_tensor(rng, {3});
    const Tensor wimg = oracle::random_tensor(rng, {3, 2, 2});
    const auto wsum = [&](const Tensor& y) { return sum(mul(y, wimg)); };
    CHECK(oracle::gradient_error([&](const Tensor& x) { return wsum(conv2d(x, kw, kb, 2, 1)); }, img) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& k) { return wsum(conv2d(img, k, kb, 2, 1)); }, kw) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& b) { return wsum(conv2d(img, kw, b, 2, 1)); }, kb) < tol);
    const Tensor w11 = oracle::random_tensor(rng, {3, 2});
    const Tensor wfull = oracle::random_tensor(rng, {3, 4, 4});
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(mul(conv_1x1(x, w11, kb), wfull)); }, img) < tol);
    CHECK(oracle::gradient_error([&](const Tensor& k) { return sum(mul(conv_1x1(img, k, kb), wfull)); }, w11) < tol);
    const Tensor w2 = oracle::random_tensor(rng, {2, 2, 2});
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(mul(avg_pool2(x), w2)); }, img) < tol);

    const std::vector<std::size_t> idx = {0, 5, 5, 11};
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(square(gather(x, idx))); }, m34) < tol);
    const std::vector<std::size_t> cols = {3, 1};
    CHECK(oracle::gradient_error([&](const Tensor& x) { return sum(square(gather_columns(x, cols))); }, m34) < tol);
    CHECK(oracle::gradient_error(
              [&](const Tensor& x) {
                  const std::vector<Tensor> parts = {x, scale(x, 2.0)};
                  return sum(square(concat(parts)));
              },
              m34) < tol);
}

TEST_CASE("abs subgradient at zero is zero") {
    Tensor x = Tensor::from({3}, {0.0, 0.1, -0.2}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(abs(x)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == -1.0);
}

TEST_CASE("no tape means no tracking") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    const Tensor y = square(x);
    CHECK_FALSE(y.requires_grad());
}
