// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ada/rng.hpp"

namespace ada {

namespace detail {
struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first needed; then value.size()
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};
struct TensorAccess;
}  // namespace detail

/// Dense row-major tensor of 64-bit reals with an optional gradient buffer.
///
/// Tensor is a cheap shared handle: copies alias the same storage. Values are
/// treated as immutable once the tensor participates in a forward pass; the
/// gradient buffer is the only field mutated by backward passes. Optimizers
/// update parameters through mutable_values() strictly between passes (any
/// tape built from the old values is stale afterwards and must be discarded).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double fill, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    /// Uniform init in [-a, +a] with a = sqrt(6 / (fan_in + fan_out)).
    static Tensor glorot(std::vector<std::size_t> shape, std::size_t fan_in,
                         std::size_t fan_out, Rng& rng, bool requires_grad = true);

    bool defined() const { return d_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->value.size(); }
    bool requires_grad() const { return d_->requires_grad; }

    std::span<const double> values() const { return d_->value; }
    /// Direct write access for optimizers and initialization. See class note.
    std::vector<double>& mutable_values() { return d_->value; }

    /// Gradient buffer; zeros-allocated on first access.
    std::span<const double> grad() const {
        d_->ensure_grad();
        return d_->grad;
    }
    void zero_grad() {
        if (!d_->grad.empty()) d_->grad.assign(d_->grad.size(), 0.0);
    }
    void accumulate_grad(std::size_t flat, double g) {
        d_->ensure_grad();
        d_->grad[flat] += g;
    }

    double at(std::size_t flat) const { return d_->value[flat]; }
    double at(std::size_t row, std::size_t col) const {
        return d_->value[row * d_->shape[1] + col];
    }

    /// True when the two handles alias the same storage.
    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    std::string shape_string() const;

    /// All values finite (no NaN/Inf)?
    bool all_finite() const;

    const std::shared_ptr<detail::TensorData>& data_ptr() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<detail::TensorData> d_;
    friend class Tape;
    friend struct detail::TensorAccess;
};

namespace detail {
/// Internal factory for op implementations.
struct TensorAccess {
    static Tensor make(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }
};
}  // namespace detail

/// Define-by-run record of one forward pass.
///
/// Every op appends a node holding its backward rule; backward() replays the
/// nodes in reverse. A tape is rebuilt per forward pass and confined to one
/// logical thread. Constructing with recording=false gives a no-op tape for
/// evaluation passes (ops then skip node creation entirely).
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of leaf tensors (parameters, inputs) accumulate across
    /// repeated calls; gradients of op outputs are reset at the start of each
    /// call so a second backward on the same tape stays mathematically exact.
    void backward(const Tensor& loss);

    // Used by op implementations.
    void record(std::shared_ptr<detail::TensorData> output, std::function<void()> back);
    bool wants_grad(const Tensor& t) const { return recording_ && t.requires_grad(); }

private:
    struct Node {
        std::shared_ptr<detail::TensorData> output;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool recording_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All of them validate shapes, propagate
// requires_grad, and guarantee finite outputs for finite inputs (log excepted,
// which rejects non-positive inputs instead).
// ---------------------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// [m x k] * [k] -> [m]
Tensor matvec(Tape& tape, const Tensor& a, const Tensor& v);
/// Elementwise product, identical shapes.
Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b);
/// Elementwise sum, identical shapes.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// Elementwise difference, identical shapes.
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
/// x * c for a plain constant c.
Tensor scale(Tape& tape, const Tensor& x, double c);
/// x + c elementwise for a plain constant c.
Tensor add_const(Tape& tape, const Tensor& x, double c);
/// s * x where s is a one-element tensor (gradient flows to both).
Tensor scalar_mul(Tape& tape, const Tensor& s, const Tensor& x);
/// x / s where s is a one-element tensor.
Tensor scalar_div(Tape& tape, const Tensor& x, const Tensor& s);
/// Dot product of two equal-length rank-1 tensors -> [1].
Tensor dot(Tape& tape, const Tensor& a, const Tensor& b);
/// Sum of all entries -> [1].
Tensor sum_all(Tape& tape, const Tensor& x);
/// Mean of all entries -> [1].
Tensor mean_all(Tape& tape, const Tensor& x);

enum class EltOp { sigmoid, relu, exp, log, softplus };

/// Elementwise nonlinearity. log requires strictly positive inputs.
Tensor elementwise(Tape& tape, EltOp op, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor relu(Tape& tape, const Tensor& x);
Tensor exp_op(Tape& tape, const Tensor& x);
Tensor log_op(Tape& tape, const Tensor& x);
Tensor softplus(Tape& tape, const Tensor& x);

/// Clamp to [lo, hi]; gradient passes only where unclamped.
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);

/// Max-subtracted softmax over a rank-1 tensor. Masked entries (mask[i] ==
/// false) output exactly 0 and receive no gradient. mask == nullptr keeps all.
Tensor softmax_masked(Tape& tape, const Tensor& x, const std::vector<bool>* mask);
Tensor softmax(Tape& tape, const Tensor& x);
/// Independent softmax over each row of a rank-2 tensor.
Tensor softmax_rows(Tape& tape, const Tensor& x);

/// x / max(||x||_2, eps) over a rank-1 tensor.
Tensor l2_normalize(Tape& tape, const Tensor& x, double eps = 1e-12);

/// Normalize over all entries of x (one example's flattened feature map) to
/// zero mean / unit variance, then apply the elementwise affine gain/bias.
/// gain and bias must have x's shape or be single-element tensors.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// Same data, new shape (element count must match).
Tensor reshape(Tape& tape, const Tensor& x, std::vector<std::size_t> shape);
Tensor flatten(Tape& tape, const Tensor& x);
/// Rank-2 transpose.
Tensor transpose(Tape& tape, const Tensor& x);
/// One element as a [1] tensor.
Tensor at_index(Tape& tape, const Tensor& x, std::size_t flat);
/// Row r of a rank-2 tensor as a rank-1 tensor (embedding lookup; gradient
/// flows only into that row).
Tensor lookup_row(Tape& tape, const Tensor& table, std::size_t row);
/// Stack equal-length rank-1 tensors as the rows of a rank-2 tensor.
Tensor stack_rows(Tape& tape, std::span<const Tensor> rows);
/// Concatenate rank-2 tensors with equal row counts along columns.
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
/// Concatenate one-element tensors into a rank-1 tensor.
Tensor concat_scalars(Tape& tape, std::span<const Tensor> scalars);

/// Sliding windows of kernel width w over the rows of x [F x D], zero-padded
/// so the output keeps F rows; row f holds the flattened w x D patch centred
/// at f (left offset (w-1)/2). The linear building block of the 1-D conv.
Tensor im2col_rows(Tape& tape, const Tensor& x, int w);
/// Max over row windows of `width` rows, stride `stride`, per column. The
/// final window may be narrower. [F x C] -> [ceil(F/stride') x C].
Tensor maxpool_rows(Tape& tape, const Tensor& x, int width, int stride);

/// Convenience free function; identical to tape.backward(loss).
void backward(Tape& tape, const Tensor& loss);

}  // namespace ada
