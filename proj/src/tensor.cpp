#include "hcseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace hcseg {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) throw ContractError(std::string(what) + ": non-finite value");
    }
}

} // namespace

namespace detail {

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool track, const char* op) {
#ifndef NDEBUG
    check_finite(data, op);
#else
    (void)op;
#endif
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (track) {
        impl->requires_grad = true;
        impl->grad.assign(impl->data.size(), 0.0);
    }
    return Tensor(std::move(impl));
}

void record(std::vector<std::shared_ptr<TensorImpl>> inputs, const Tensor& out, Tape::BackwardFn fn) {
    g_active_tape->record(std::move(inputs), out.impl(), std::move(fn));
}

bool wants_grad(const std::shared_ptr<TensorImpl>& t) { return t && t->requires_grad; }

} // namespace detail

using detail::make_output;
using detail::record;
using detail::tracking;
using detail::wants_grad;

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// C[M×N] += op(A)·op(B) with inner dimension K.
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t p = 0; p < K; ++p) {
            const double a = A[i * K + p];
            if (a == 0.0) continue;
            const double* b = B + p * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// A is [K×M].
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t p = 0; p < K; ++p) {
        const double* b = B + p * N;
        for (std::size_t i = 0; i < M; ++i) {
            const double a = A[p * M + i];
            if (a == 0.0) continue;
            double* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// B is [N×K].
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        for (std::size_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double acc = 0.0;
            for (std::size_t p = 0; p < K; ++p) acc += a[p] * b[p];
            C[i * N + j] += acc;
        }
    }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
    std::vector<double> out(a.numel());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    const bool track = tracking({&a});
    Tensor result = make_output(a.shape(), std::move(out), track, name);
    if (track) {
        auto ai = a.impl();
        auto oi = result.impl();
        record({ai}, result, [ai, oi, deriv] {
            for (std::size_t i = 0; i < oi->data.size(); ++i) {
                ai->grad[i] += oi->grad[i] * deriv(ai->data[i], oi->data[i]);
            }
        });
    }
    return result;
}

} // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    if (!std::isfinite(value)) throw ContractError("Tensor::full: non-finite value");
    const std::size_t n = shape_numel(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(n, value);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(n, 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " + std::to_string(data.size()));
    }
    check_finite(data, "Tensor::from");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("Tensor::dim: axis out of range for " + shape_str(shape()));
    return impl_->shape[axis];
}

void Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (flag) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
        impl_->grad.clear();
    }
}

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw DimensionError("Tensor::at needs a matrix, got " + shape_str(shape()));
    return impl_->data[row * impl_->shape[1] + col];
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>(*impl_);
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
                  BackwardFn fn) {
    if (consumed_) throw ContractError("Tape::record on a consumed tape; call clear() first");
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    if (consumed_) throw ContractError("backward: tape already replayed; call clear() first");
    if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any tracked tensor");

    // A loss that is a leaf has no recorded node; only its own gradient is seeded.
    std::size_t stop = 0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].output == loss.impl()) {
            stop = i + 1;
            break;
        }
    }
    loss.impl()->grad[0] += 1.0;
    for (std::size_t i = stop; i-- > 0;) nodes_[i].fn();
    consumed_ = true;
}

void Tape::clear() {
    nodes_.clear();
    consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
    if (g_active_tape == nullptr) throw ContractError("backward: no active tape");
    g_active_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    const bool track = tracking({&a, &b});
    Tensor result = make_output({m, n}, std::move(out), track, "matmul");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi, m, n, k] {
            if (wants_grad(ai)) gemm_nt(m, k, n, oi->grad.data(), bi->data.data(), ai->grad.data());
            if (wants_grad(bi)) gemm_tn(k, n, m, ai->data.data(), oi->grad.data(), bi->grad.data());
        });
    }
    return result;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_tn");
    require_rank(b, 2, "matmul_tn");
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul_tn: inner dimensions differ " + shape_str(a.shape()) + "ᵀ x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_tn(m, n, k, a.data().data(), b.data().data(), out.data());
    const bool track = tracking({&a, &b});
    Tensor result = make_output({m, n}, std::move(out), track, "matmul_tn");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi, m, n, k] {
            // dA[k×m] = B·dCᵀ, dB[k×n] = A·dC
            if (wants_grad(ai)) gemm_nt(k, m, n, bi->data.data(), oi->grad.data(), ai->grad.data());
            if (wants_grad(bi)) gemm_nn(k, n, m, ai->data.data(), oi->grad.data(), bi->grad.data());
        });
    }
    return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "ᵀ");
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data());
    const bool track = tracking({&a, &b});
    Tensor result = make_output({m, n}, std::move(out), track, "matmul_nt");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi, m, n, k] {
            // dA[m×k] = dC·B, dB[n×k] = dCᵀ·A
            if (wants_grad(ai)) gemm_nn(m, k, n, oi->grad.data(), bi->data.data(), ai->grad.data());
            if (wants_grad(bi)) gemm_tn(n, k, m, oi->grad.data(), ai->data.data(), bi->grad.data());
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto in = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    const bool track = tracking({&a});
    Tensor result = make_output({n, m}, std::move(out), track, "transpose");
    if (track) {
        auto ai = a.impl(), oi = result.impl();
        record({ai}, result, [ai, oi, m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += oi->grad[j * m + i];
        });
    }
    return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const bool track = tracking({&a});
    Tensor result = make_output(std::move(shape), std::move(out), track, "reshape");
    if (track) {
        auto ai = a.impl(), oi = result.impl();
        record({ai}, result, [ai, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    const bool track = tracking({&a, &b});
    Tensor result = make_output(a.shape(), std::move(out), track, "add");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (wants_grad(ai)) ai->grad[i] += oi->grad[i];
                if (wants_grad(bi)) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    const bool track = tracking({&a, &b});
    Tensor result = make_output(a.shape(), std::move(out), track, "sub");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (wants_grad(ai)) ai->grad[i] += oi->grad[i];
                if (wants_grad(bi)) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    const bool track = tracking({&a, &b});
    Tensor result = make_output(a.shape(), std::move(out), track, "mul");
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = result.impl();
        record({ai, bi}, result, [ai, bi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (wants_grad(ai)) ai->grad[i] += oi->grad[i] * bi->data[i];
                if (wants_grad(bi)) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    return unary(a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    require_rank(x, 2, "add_channel_bias");
    const std::size_t c = x.dim(0), n = x.dim(1);
    if (bias.numel() != c) throw DimensionError("add_channel_bias: bias size differs from channel count");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[i];
    const bool track = tracking({&x, &bias});
    Tensor result = make_output(x.shape(), std::move(out), track, "add_channel_bias");
    if (track) {
        auto xi = x.impl(), bi = bias.impl(), oi = result.impl();
        record({xi, bi}, result, [xi, bi, oi, c, n] {
            for (std::size_t i = 0; i < c; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = oi->grad[i * n + j];
                    if (wants_grad(xi)) xi->grad[i * n + j] += g;
                    acc += g;
                }
                if (wants_grad(bi)) bi->grad[i] += acc;
            }
        });
    }
    return result;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank(x, 2, "add_row_bias");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (bias.numel() != c) throw DimensionError("add_row_bias: bias size differs from column count");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias[j];
    const bool track = tracking({&x, &bias});
    Tensor result = make_output(x.shape(), std::move(out), track, "add_row_bias");
    if (track) {
        auto xi = x.impl(), bi = bias.impl(), oi = result.impl();
        record({xi, bi}, result, [xi, bi, oi, c, n] {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    const double g = oi->grad[i * c + j];
                    if (wants_grad(xi)) xi->grad[i * c + j] += g;
                    if (wants_grad(bi)) bi->grad[j] += g;
                }
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const bool track = tracking({&a});
    Tensor result = make_output({}, {acc}, track, "sum");
    if (track) {
        auto ai = a.impl(), oi = result.impl();
        record({ai}, result, [ai, oi] {
            const double g = oi->grad[0];
            for (double& v : ai->grad) v += g;
        });
    }
    return result;
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

namespace {
double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
} // namespace

Tensor sigmoid(const Tensor& a) {
    return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
    return unary(
        a, "silu", [](double x) { return x * stable_sigmoid(x); },
        [](double x, double) {
            const double s = stable_sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor square(const Tensor& a) {
    return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
    return unary(
        a, "abs", [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
    return unary(
        a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax_rows(const Tensor& x, double scale) {
    require_rank(x, 2, "softmax_rows");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw DomainError("softmax_rows: scale must be positive");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    const auto in = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = in.data() + i * n;
        double* o = out.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp((row[j] - mx) / scale);
            z += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    const bool track = tracking({&x});
    Tensor result = make_output(x.shape(), std::move(out), track, "softmax_rows");
    if (track) {
        auto xi = x.impl(), oi = result.impl();
        record({xi}, result, [xi, oi, m, n, scale] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = oi->data.data() + i * n;
                const double* dy = oi->grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                double* dx = xi->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot) / scale;
            }
        });
    }
    return result;
}

Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
    require_rank(x, 2, "masked_softmax_rows");
    if (mask.size() != x.numel()) throw DimensionError("masked_softmax_rows: mask size differs from input");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n, 0.0);
    const auto in = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (mask[i * n + j]) mx = std::max(mx, in[i * n + j]);
        if (!std::isfinite(mx)) throw ContractError("masked_softmax_rows: row without candidates");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask[i * n + j]) continue;
            out[i * n + j] = std::exp(in[i * n + j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    const bool track = tracking({&x});
    Tensor result = make_output(x.shape(), std::move(out), track, "masked_softmax_rows");
    if (track) {
        auto xi = x.impl(), oi = result.impl();
        record({xi}, result, [xi, oi, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = oi->data.data() + i * n;
                const double* dy = oi->grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                double* dx = xi->grad.data() + i * n;
                // masked entries have y == 0 and receive nothing
                for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return result;
}

Tensor divide_by_abs_scale(const Tensor& x, const Tensor& s, double floor) {
    if (s.numel() != 1) throw DimensionError("divide_by_abs_scale: scale must have one element");
    if (!(floor > 0.0)) throw DomainError("divide_by_abs_scale: floor must be positive");
    const double raw = s[0];
    const bool clamped = std::fabs(raw) < floor;
    const double denom = clamped ? floor : std::fabs(raw);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / denom;
    const bool track = tracking({&x, &s});
    Tensor result = make_output(x.shape(), std::move(out), track, "divide_by_abs_scale");
    if (track) {
        auto xi = x.impl(), si = s.impl(), oi = result.impl();
        record({xi, si}, result, [xi, si, oi, denom, clamped, raw] {
            double acc = 0.0;
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (wants_grad(xi)) xi->grad[i] += oi->grad[i] / denom;
                acc += oi->grad[i] * xi->data[i];
            }
            if (wants_grad(si) && !clamped) {
                const double sign = raw > 0 ? 1.0 : -1.0;
                si->grad[0] += -acc / (denom * denom) * sign;
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank(x, 2, "layer_norm");
    if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
    const std::size_t c = x.dim(0), n = x.dim(1);
    if (gain.numel() != c || bias.numel() != c) throw DimensionError("layer_norm: gain/bias size differs from C");
    std::vector<double> out(c * n), xhat(c * n), rstd(n);
    const auto in = x.data();
    for (std::size_t j = 0; j < n; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < c; ++i) mu += in[i * n + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            const double d = in[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        rstd[j] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < c; ++i) {
            xhat[i * n + j] = (in[i * n + j] - mu) * rstd[j];
            out[i * n + j] = gain[i] * xhat[i * n + j] + bias[i];
        }
    }
    const bool track = tracking({&x, &gain, &bias});
    Tensor result = make_output(x.shape(), std::move(out), track, "layer_norm");
    if (track) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = result.impl();
        record({xi, gi, bi}, result, [xi, gi, bi, oi, c, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
            for (std::size_t j = 0; j < n; ++j) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t i = 0; i < c; ++i) {
                    const double dy = oi->grad[i * n + j];
                    const double dxh = dy * gi->data[i];
                    mean_d += dxh;
                    mean_dx += dxh * xhat[i * n + j];
                    if (wants_grad(gi)) gi->grad[i] += dy * xhat[i * n + j];
                    if (wants_grad(bi)) bi->grad[i] += dy;
                }
                if (!wants_grad(xi)) continue;
                mean_d /= static_cast<double>(c);
                mean_dx /= static_cast<double>(c);
                for (std::size_t i = 0; i < c; ++i) {
                    const double dxh = oi->grad[i * n + j] * gi->data[i];
                    xi->grad[i * n + j] += rstd[j] * (dxh - mean_d - xhat[i * n + j] * mean_dx);
                }
            }
        });
    }
    return result;
}

Tensor l2_normalize_columns(const Tensor& x, double eps) {
    require_rank(x, 2, "l2_normalize_columns");
    const std::size_t c = x.dim(0), n = x.dim(1);
    std::vector<double> out(c * n), norms(n);
    const auto in = x.data();
    for (std::size_t j = 0; j < n; ++j) {
        double ss = 0.0;
        for (std::size_t i = 0; i < c; ++i) ss += in[i * n + j] * in[i * n + j];
        norms[j] = std::sqrt(ss);
        const double d = std::max(norms[j], eps);
        for (std::size_t i = 0; i < c; ++i) out[i * n + j] = in[i * n + j] / d;
    }
    const bool track = tracking({&x});
    Tensor result = make_output(x.shape(), std::move(out), track, "l2_normalize_columns");
    if (track) {
        auto xi = x.impl(), oi = result.impl();
        record({xi}, result, [xi, oi, c, n, eps, norms = std::move(norms)] {
            for (std::size_t j = 0; j < n; ++j) {
                if (norms[j] > eps) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < c; ++i) dot += oi->data[i * n + j] * oi->grad[i * n + j];
                    for (std::size_t i = 0; i < c; ++i) {
                        xi->grad[i * n + j] += (oi->grad[i * n + j] - oi->data[i * n + j] * dot) / norms[j];
                    }
                } else {
                    for (std::size_t i = 0; i < c; ++i) xi->grad[i * n + j] += oi->grad[i * n + j] / eps;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Convolutions and pooling

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin) throw DimensionError("conv2d: weight input channels differ from x");
    if (stride == 0) throw DomainError("conv2d: stride must be positive");
    if (h + 2 * pad < kh || wd + 2 * pad < kw) throw DimensionError("conv2d: kernel larger than padded input");
    if (b.defined() && b.numel() != cout) throw DimensionError("conv2d: bias size differs from Cout");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t ckk = cin * kh * kw, hw = ho * wo;

    auto cols = std::make_shared<std::vector<double>>(ckk * hw, 0.0);
    const auto in = x.data();
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                double* row = cols->data() + ((c * kh + ky) * kw + kx) * hw;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        row[oy * wo + ox] = in[(c * h + iy) * wd + ix];
                    }
                }
            }

    std::vector<double> out(cout * hw, 0.0);
    if (b.defined()) {
        for (std::size_t o = 0; o < cout; ++o) std::fill_n(out.data() + o * hw, hw, b[o]);
    }
    gemm_nn(cout, hw, ckk, w.data().data(), cols->data(), out.data());

    const bool track = tracking({&x, &w, &b});
    Tensor result = make_output({cout, ho, wo}, std::move(out), track, "conv2d");
    if (track) {
        auto xi = x.impl(), wi = w.impl(), oi = result.impl();
        std::shared_ptr<TensorImpl> bi = b.defined() ? b.impl() : nullptr;
        record({xi, wi, bi}, result, [=] {
            const double* dout = oi->grad.data();
            if (wants_grad(wi)) gemm_nt(cout, ckk, hw, dout, cols->data(), wi->grad.data());
            if (wants_grad(bi)) {
                for (std::size_t o = 0; o < cout; ++o) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < hw; ++p) acc += dout[o * hw + p];
                    bi->grad[o] += acc;
                }
            }
            if (wants_grad(xi)) {
                std::vector<double> dcols(ckk * hw, 0.0);
                gemm_tn(ckk, hw, cout, wi->data.data(), dout, dcols.data());
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const double* row = dcols.data() + ((c * kh + ky) * kw + kx) * hw;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                              static_cast<std::ptrdiff_t>(pad);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    xi->grad[(c * h + iy) * wd + ix] += row[oy * wo + ox];
                                }
                            }
                        }
            }
        });
    }
    return result;
}

Tensor conv_1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 3, "conv_1x1");
    require_rank(w, 2, "conv_1x1");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    if (w.dim(1) != cin) {
        throw DimensionError("conv_1x1: weight " + shape_str(w.shape()) + " does not accept " + std::to_string(cin) +
                             " input channels");
    }
    Tensor flat = reshape(x, {cin, h * wd});
    Tensor y = matmul(w, flat);
    if (b.defined()) y = add_channel_bias(y, b);
    return reshape(y, {w.dim(0), h, wd});
}

Tensor avg_pool2(const Tensor& x) {
    require_rank(x, 3, "avg_pool2");
    const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    if (h % 2 != 0 || wd % 2 != 0) {
        throw DimensionError("avg_pool2: spatial size " + shape_str(x.shape()) + " is not even");
    }
    const std::size_t ho = h / 2, wo = wd / 2;
    std::vector<double> out(c * ho * wo);
    const auto in = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx) {
                const double* base = in.data() + (ch * h + 2 * y) * wd + 2 * xx;
                out[(ch * ho + y) * wo + xx] = 0.25 * (base[0] + base[1] + base[wd] + base[wd + 1]);
            }
    const bool track = tracking({&x});
    Tensor result = make_output({c, ho, wo}, std::move(out), track, "avg_pool2");
    if (track) {
        auto xi = x.impl(), oi = result.impl();
        record({xi}, result, [xi, oi, c, h, wd, ho, wo] {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < ho; ++y)
                    for (std::size_t xx = 0; xx < wo; ++xx) {
                        const double g = 0.25 * oi->grad[(ch * ho + y) * wo + xx];
                        double* base = xi->grad.data() + (ch * h + 2 * y) * wd + 2 * xx;
                        base[0] += g;
                        base[1] += g;
                        base[wd] += g;
                        base[wd + 1] += g;
                    }
        });
    }
    return result;
}

Tensor strided_downsample(const Tensor& x, DownsampleKind kind, const Tensor& w, const Tensor& b) {
    require_rank(x, 3, "strided_downsample");
    if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
        throw DimensionError("strided_downsample: odd spatial size " + shape_str(x.shape()));
    }
    switch (kind) {
    case DownsampleKind::avg_pool2:
        return avg_pool2(x);
    case DownsampleKind::strided_conv3:
        require_rank(w, 4, "strided_downsample");
        if (w.dim(2) != 3 || w.dim(3) != 3) throw DimensionError("strided_downsample: kernel must be 3x3");
        return conv2d(x, w, b, 2, 1);
    }
    throw ContractError("strided_downsample: unknown kind");
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.numel()) throw DimensionError("gather: index out of range");
        out[i] = a[indices[i]];
    }
    const bool track = tracking({&a});
    Tensor result = make_output({indices.size()}, std::move(out), track, "gather");
    if (track) {
        auto ai = a.impl(), oi = result.impl();
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        record({ai}, result, [ai, oi, idx = std::move(idx)] {
            for (std::size_t i = 0; i < idx.size(); ++i) ai->grad[idx[i]] += oi->grad[i];
        });
    }
    return result;
}

Tensor gather_columns(const Tensor& a, std::span<const std::size_t> indices) {
    require_rank(a, 2, "gather_columns");
    const std::size_t m = a.dim(0), n = a.dim(1), k = indices.size();
    for (std::size_t c : indices)
        if (c >= n) throw DimensionError("gather_columns: column index out of range");
    std::vector<double> out(m * k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = a[i * n + indices[j]];
    const bool track = tracking({&a});
    Tensor result = make_output({m, k}, std::move(out), track, "gather_columns");
    if (track) {
        auto ai = a.impl(), oi = result.impl();
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        record({ai}, result, [ai, oi, m, n, k, idx = std::move(idx)] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < k; ++j) ai->grad[i * n + idx[j]] += oi->grad[i * k + j];
        });
    }
    return result;
}

Tensor concat(std::span<const Tensor> parts) {
    std::vector<double> out;
    bool track = false;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        track = track || tracking({&p});
        inputs.push_back(p.impl());
    }
    const std::size_t total = out.size();
    Tensor result = make_output({total}, std::move(out), track, "concat");
    if (track) {
        auto oi = result.impl();
        record(inputs, result, [inputs, oi] {
            std::size_t offset = 0;
            for (const auto& in : inputs) {
                if (wants_grad(in)) {
                    for (std::size_t i = 0; i < in->data.size(); ++i) in->grad[i] += oi->grad[offset + i];
                }
                offset += in->data.size();
            }
        });
    }
    return result;
}

} // namespace hcseg
