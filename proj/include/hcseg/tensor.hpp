#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hcseg/errors.hpp"

namespace hcseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty unless requires_grad
    bool requires_grad = false;
};

// Dense row-major float64 array. Copies share storage (handle semantics);
// use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    // Throws ContractError if any value is NaN/Inf or the size does not match.
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    // Direct writes bypass the tape; meant for optimizers and initializers.
    std::span<double> mutable_data() { return impl_->data; }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag);
    void zero_grad();

    double item() const;
    double operator[](std::size_t flat) const { return impl_->data[flat]; }
    double at(std::size_t row, std::size_t col) const;

    Tensor detach() const; // deep copy without gradient tracking
    Tensor clone() const;  // deep copy keeping the requires_grad flag

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable operations. Replaying backward visits
// each node once, newest first, which is a reverse topological order because
// nodes are appended in execution order.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                std::shared_ptr<TensorImpl> output, BackwardFn fn);

    // Seeds d(loss)/d(loss) = 1 and propagates. A tape can be replayed once;
    // call clear() before recording again.
    void backward(const Tensor& loss);

    void clear();
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

// Makes `tape` the recording tape of the calling thread for its lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// backward on the active tape.
void backward(const Tensor& loss);

// Building blocks for operations defined outside the core.
namespace detail {
bool tracking(std::initializer_list<const Tensor*> inputs);
Tensor make_output(Shape shape, std::vector<double> data, bool track, const char* op);
void record(std::vector<std::shared_ptr<TensorImpl>> inputs, const Tensor& out, Tape::BackwardFn fn);
bool wants_grad(const std::shared_ptr<TensorImpl>& t);
} // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations. Results require grad iff a tape is active and
// at least one input requires grad.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ·b, a:[k×m], b:[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a·bᵀ, a:[m×k], b:[n×k]
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// x:[C×N] + b:[C] broadcast along columns.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// x:[N×C] + b:[C] broadcast along rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor square(const Tensor& a);
// Subgradient at 0 is 0.
Tensor abs(const Tensor& a);
// Gradient is zero where the input was clipped.
Tensor clamp(const Tensor& a, double lo, double hi);

// Row-wise softmax of x/scale with max subtraction. scale must be > 0.
Tensor softmax_rows(const Tensor& x, double scale);
// Softmax restricted to entries with mask != 0; masked entries output 0.
// Every row needs at least one unmasked entry.
Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> mask);
// x / max(|s|, floor) with s a one-element tensor; no gradient reaches s
// while |s| is below the floor.
Tensor divide_by_abs_scale(const Tensor& x, const Tensor& s, double floor);

// Per-column normalization over the channel (row) axis followed by gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Each column divided by max(‖column‖₂, eps).
Tensor l2_normalize_columns(const Tensor& x, double eps = 1e-12);

// x:[Cin×H×W], w:[Cout×Cin×k×k], b:[Cout] (b may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);
// x:[Cin×H×W], w:[Cout×Cin], b:[Cout].
Tensor conv_1x1(const Tensor& x, const Tensor& w, const Tensor& b);
// Mean over 2×2 blocks; H and W must be even.
Tensor avg_pool2(const Tensor& x);

enum class DownsampleKind { avg_pool2, strided_conv3 };

// Halves H and W exactly. strided_conv3 is a 3×3 convolution with stride 2
// and padding 1 using w:[C'×C×3×3], b:[C']; avg_pool2 ignores w and b.
Tensor strided_downsample(const Tensor& x, DownsampleKind kind, const Tensor& w = {}, const Tensor& b = {});

// out[i] = a[indices[i]] over the flattened input, shape [indices.size()].
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
// Columns of a [m×n] picked by index, result [m×indices.size()].
Tensor gather_columns(const Tensor& a, std::span<const std::size_t> indices);
// Concatenate 1-D (or flattened) tensors end to end.
Tensor concat(std::span<const Tensor> parts);

} // namespace hcseg
