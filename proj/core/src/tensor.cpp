// SPDX-License-Identifier: Apache-2.0
#include "ada/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ada/error.hpp"

namespace ada {

namespace {

using detail::TensorData;
using DataPtr = std::shared_ptr<TensorData>;

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    if (shape.empty()) os << "()";
    return os.str();
}

std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

DataPtr make_data(std::vector<std::size_t> shape, std::vector<double> value, bool rg) {
    if (checked_size(shape) != value.size())
        throw ShapeError("shape " + shape_str(shape) + " does not match value count " +
                         std::to_string(value.size()));
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(value);
    d->requires_grad = rg;
    return d;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
    if (x.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + x.shape_string());
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = checked_size(shape);
    return Tensor(make_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double fill, bool requires_grad) {
    std::size_t n = checked_size(shape);
    return Tensor(make_data(std::move(shape), std::vector<double>(n, fill), requires_grad));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values,
                    bool requires_grad) {
    return Tensor(make_data(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_data({1}, {v}, requires_grad));
}

Tensor Tensor::glorot(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng, bool requires_grad) {
    std::size_t n = checked_size(shape);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-a, a);
    return Tensor(make_data(std::move(shape), std::move(v), requires_grad));
}

std::string Tensor::shape_string() const { return shape_str(d_->shape); }

bool Tensor::all_finite() const {
    for (double v : d_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tape::record(std::shared_ptr<detail::TensorData> output, std::function<void()> back) {
    nodes_.push_back(Node{std::move(output), std::move(back)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got shape " +
                         (loss.defined() ? loss.shape_string() : std::string("<empty>")));
    // Op outputs are intermediates: reset them so a repeated backward stays
    // exact. Leaves are never op outputs, so their gradients accumulate.
    for (auto& node : nodes_) {
        node.output->ensure_grad();
        std::fill(node.output->grad.begin(), node.output->grad.end(), 0.0);
    }
    loss.d_->ensure_grad();
    loss.d_->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->back) it->back();
    }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

namespace {

/// Shared glue: build the output tensor and register the backward closure if
/// any input needs a gradient.
Tensor finish(Tape& tape, std::vector<std::size_t> shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, std::function<void(TensorData&)> back) {
    bool needs = false;
    if (tape.recording()) {
        for (const Tensor& t : inputs) {
            if (t.requires_grad()) {
                needs = true;
                break;
            }
        }
    }
    auto out = make_data(std::move(shape), std::move(value), needs);
    Tensor result = detail::TensorAccess::make(out);
    if (needs) {
        tape.record(out, [out, fn = std::move(back)]() { fn(*out); });
    }
    return result;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner extents differ, " + a.shape_string() + " vs " +
                         b.shape_string());
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = av[i * k + kk];
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aik * bv[kk * n + j];
        }
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    return finish(tape, {m, n}, std::move(out), {a, b}, [ad, bd, m, k, n](TensorData& o) {
        if (ad->requires_grad) {
            ad->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        s += o.grad[i * n + j] * bd->value[kk * n + j];
                    ad->grad[i * k + kk] += s;
                }
        }
        if (bd->requires_grad) {
            bd->ensure_grad();
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        s += ad->value[i * k + kk] * o.grad[i * n + j];
                    bd->grad[kk * n + j] += s;
                }
        }
    });
}

Tensor matvec(Tape& tape, const Tensor& a, const Tensor& v) {
    require_rank(a, 2, "matvec");
    require_rank(v, 1, "matvec");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    if (v.shape()[0] != k)
        throw ShapeError("matvec: inner extents differ, " + a.shape_string() + " vs " +
                         v.shape_string());
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) s += a.at(i, kk) * v.at(kk);
        out[i] = s;
    }
    auto ad = a.data_ptr();
    auto vd = v.data_ptr();
    return finish(tape, {m}, std::move(out), {a, v}, [ad, vd, m, k](TensorData& o) {
        if (ad->requires_grad) {
            ad->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk)
                    ad->grad[i * k + kk] += o.grad[i] * vd->value[kk];
        }
        if (vd->requires_grad) {
            vd->ensure_grad();
            for (std::size_t kk = 0; kk < k; ++kk) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i) s += ad->value[i * k + kk] * o.grad[i];
                vd->grad[kk] += s;
            }
        }
    });
}

Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    return finish(tape, a.shape(), std::move(out), {a, b}, [ad, bd](TensorData& o) {
        if (ad->requires_grad) {
            ad->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                ad->grad[i] += o.grad[i] * bd->value[i];
        }
        if (bd->requires_grad) {
            bd->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                bd->grad[i] += o.grad[i] * ad->value[i];
        }
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    return finish(tape, a.shape(), std::move(out), {a, b}, [ad, bd](TensorData& o) {
        for (const auto& d : {ad, bd}) {
            if (!d->requires_grad) continue;
            d->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) d->grad[i] += o.grad[i];
        }
    });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    return finish(tape, a.shape(), std::move(out), {a, b}, [ad, bd](TensorData& o) {
        if (ad->requires_grad) {
            ad->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) ad->grad[i] += o.grad[i];
        }
        if (bd->requires_grad) {
            bd->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) bd->grad[i] -= o.grad[i];
        }
    });
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * c;
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x}, [xd, c](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) xd->grad[i] += o.grad[i] * c;
    });
}

Tensor add_const(Tape& tape, const Tensor& x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + c;
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x}, [xd](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) xd->grad[i] += o.grad[i];
    });
}

Tensor scalar_mul(Tape& tape, const Tensor& s, const Tensor& x) {
    if (s.size() != 1) throw ShapeError("scalar_mul: scale must be one element, got " + s.shape_string());
    const double sv = s.at(0);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.at(i);
    auto sd = s.data_ptr();
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {s, x}, [sd, xd](TensorData& o) {
        if (sd->requires_grad) {
            sd->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * xd->value[i];
            sd->grad[0] += acc;
        }
        if (xd->requires_grad) {
            xd->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                xd->grad[i] += o.grad[i] * sd->value[0];
        }
    });
}

Tensor scalar_div(Tape& tape, const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("scalar_div: divisor must be one element, got " + s.shape_string());
    const double sv = s.at(0);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) / sv;
    auto sd = s.data_ptr();
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x, s}, [sd, xd](TensorData& o) {
        const double inv = 1.0 / sd->value[0];
        if (xd->requires_grad) {
            xd->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) xd->grad[i] += o.grad[i] * inv;
        }
        if (sd->requires_grad) {
            sd->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                acc -= o.grad[i] * xd->value[i] * inv * inv;
            sd->grad[0] += acc;
        }
    });
}

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "dot");
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    return finish(tape, {1}, {s}, {a, b}, [ad, bd](TensorData& o) {
        const double g = o.grad[0];
        if (ad->requires_grad) {
            ad->ensure_grad();
            for (std::size_t i = 0; i < ad->value.size(); ++i) ad->grad[i] += g * bd->value[i];
        }
        if (bd->requires_grad) {
            bd->ensure_grad();
            for (std::size_t i = 0; i < bd->value.size(); ++i) bd->grad[i] += g * ad->value[i];
        }
    });
}

Tensor sum_all(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    auto xd = x.data_ptr();
    return finish(tape, {1}, {s}, {x}, [xd](TensorData& o) {
        xd->ensure_grad();
        for (double& g : xd->grad) g += o.grad[0];
    });
}

Tensor mean_all(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    const double inv = 1.0 / static_cast<double>(x.size());
    auto xd = x.data_ptr();
    return finish(tape, {1}, {s * inv}, {x}, [xd, inv](TensorData& o) {
        xd->ensure_grad();
        for (double& g : xd->grad) g += o.grad[0] * inv;
    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape& tape, const Tensor& x, Fwd fwd, Bwd bwd) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.at(i));
    auto xd = x.data_ptr();
    auto shape = x.shape();
    return finish(tape, std::move(shape), std::move(out), {x}, [xd, bwd](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            xd->grad[i] += o.grad[i] * bwd(xd->value[i], o.value[i]);
    });
}

}  // namespace

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary_elementwise(
        tape, x, [](double v) { return stable_sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(Tape& tape, const Tensor& x) {
    return unary_elementwise(
        tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp_op(Tape& tape, const Tensor& x) {
    return unary_elementwise(
        tape, x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

Tensor log_op(Tape& tape, const Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x.at(i) > 0.0))
            throw DomainError("log: input must be strictly positive, got " +
                              std::to_string(x.at(i)));
    return unary_elementwise(
        tape, x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor softplus(Tape& tape, const Tensor& x) {
    return unary_elementwise(
        tape, x, [](double v) { return stable_softplus(v); },
        [](double v, double) { return stable_sigmoid(v); });
}

Tensor elementwise(Tape& tape, EltOp op, const Tensor& x) {
    switch (op) {
        case EltOp::sigmoid: return sigmoid(tape, x);
        case EltOp::relu: return relu(tape, x);
        case EltOp::exp: return exp_op(tape, x);
        case EltOp::log: return log_op(tape, x);
        case EltOp::softplus: return softplus(tape, x);
    }
    throw ConfigError("elementwise: unknown op");
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
    if (lo > hi) throw ConfigError("clamp: lo > hi");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x.at(i), lo), hi);
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x}, [xd, lo, hi](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double v = xd->value[i];
            if (v >= lo && v <= hi) xd->grad[i] += o.grad[i];
        }
    });
}

Tensor softmax_masked(Tape& tape, const Tensor& x, const std::vector<bool>* mask) {
    require_rank(x, 1, "softmax");
    const std::size_t n = x.size();
    if (mask && mask->size() != n)
        throw ShapeError("softmax: mask length " + std::to_string(mask->size()) +
                         " does not match input " + x.shape_string());
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t live = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        ++live;
        mx = std::max(mx, x.at(i));
    }
    if (live == 0) throw DomainError("softmax: every entry is masked");
    std::vector<double> out(n, 0.0);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        out[i] = std::exp(x.at(i) - mx);
        denom += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= denom;
    std::vector<bool> keep = mask ? *mask : std::vector<bool>(n, true);
    auto xd = x.data_ptr();
    return finish(tape, {n}, std::move(out), {x}, [xd, keep](TensorData& o) {
        xd->ensure_grad();
        double sum_gy = 0.0;
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (keep[i]) sum_gy += o.grad[i] * o.value[i];
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (keep[i]) xd->grad[i] += o.value[i] * (o.grad[i] - sum_gy);
    });
}

Tensor softmax(Tape& tape, const Tensor& x) { return softmax_masked(tape, x, nullptr); }

Tensor softmax_rows(Tape& tape, const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(x.at(i, j) - mx);
            denom += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
    }
    auto xd = x.data_ptr();
    return finish(tape, {m, n}, std::move(out), {x}, [xd, m, n](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            double sum_gy = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                sum_gy += o.grad[i * n + j] * o.value[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                xd->grad[i * n + j] += o.value[i * n + j] * (o.grad[i * n + j] - sum_gy);
        }
    });
}

Tensor l2_normalize(Tape& tape, const Tensor& x, double eps) {
    require_rank(x, 1, "l2_normalize");
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) norm_sq += x.at(i) * x.at(i);
    const double norm = std::sqrt(norm_sq);
    const bool guarded = !(norm > eps);
    const double denom = guarded ? eps : norm;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) / denom;
    auto xd = x.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x}, [xd, denom, guarded](TensorData& o) {
        xd->ensure_grad();
        if (guarded) {
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                xd->grad[i] += o.grad[i] / denom;
            return;
        }
        double gy = 0.0;
        for (std::size_t i = 0; i < o.grad.size(); ++i) gy += o.grad[i] * o.value[i];
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            xd->grad[i] += (o.grad[i] - o.value[i] * gy) / denom;
    });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    const bool gain_scalar = gain.size() == 1;
    const bool bias_scalar = bias.size() == 1;
    if (!gain_scalar && gain.shape() != x.shape())
        throw ShapeError("layer_norm: gain shape " + gain.shape_string() +
                         " not broadcastable to " + x.shape_string());
    if (!bias_scalar && bias.shape() != x.shape())
        throw ShapeError("layer_norm: bias shape " + bias.shape_string() +
                         " not broadcastable to " + x.shape_string());
    const std::size_t n = x.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x.at(i);
    mean *= inv_n;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = x.at(i) - mean;
        var += c * c;
    }
    var *= inv_n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    std::vector<double> xhat(n), out(n);
    for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (x.at(i) - mean) * inv_std;
        out[i] = xhat[i] * gain.at(gain_scalar ? 0 : i) + bias.at(bias_scalar ? 0 : i);
    }
    auto xd = x.data_ptr();
    auto gd = gain.data_ptr();
    auto bd = bias.data_ptr();
    return finish(tape, x.shape(), std::move(out), {x, gain, bias},
                  [xd, gd, bd, xhat, inv_std, inv_n, gain_scalar, bias_scalar](TensorData& o) {
                      const std::size_t n = o.grad.size();
                      if (bd->requires_grad) {
                          bd->ensure_grad();
                          for (std::size_t i = 0; i < n; ++i)
                              bd->grad[bias_scalar ? 0 : i] += o.grad[i];
                      }
                      if (gd->requires_grad) {
                          gd->ensure_grad();
                          for (std::size_t i = 0; i < n; ++i)
                              gd->grad[gain_scalar ? 0 : i] += o.grad[i] * xhat[i];
                      }
                      if (!xd->requires_grad) return;
                      xd->ensure_grad();
                      std::vector<double> dxhat(n);
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (std::size_t i = 0; i < n; ++i) {
                          dxhat[i] = o.grad[i] * gd->value[gain_scalar ? 0 : i];
                          mean_dxhat += dxhat[i];
                          mean_dxhat_xhat += dxhat[i] * xhat[i];
                      }
                      mean_dxhat *= inv_n;
                      mean_dxhat_xhat *= inv_n;
                      for (std::size_t i = 0; i < n; ++i)
                          xd->grad[i] +=
                              inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                  });
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<std::size_t> shape) {
    if (checked_size(shape) != x.size())
        throw ShapeError("reshape: cannot view " + x.shape_string() + " as " + shape_str(shape));
    std::vector<double> out(x.values().begin(), x.values().end());
    auto xd = x.data_ptr();
    return finish(tape, std::move(shape), std::move(out), {x}, [xd](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) xd->grad[i] += o.grad[i];
    });
}

Tensor flatten(Tape& tape, const Tensor& x) { return reshape(tape, x, {x.size()}); }

Tensor transpose(Tape& tape, const Tensor& x) {
    require_rank(x, 2, "transpose");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.at(i, j);
    auto xd = x.data_ptr();
    return finish(tape, {n, m}, std::move(out), {x}, [xd, m, n](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) xd->grad[i * n + j] += o.grad[j * m + i];
    });
}

Tensor at_index(Tape& tape, const Tensor& x, std::size_t flat) {
    if (flat >= x.size())
        throw ShapeError("at_index: index " + std::to_string(flat) + " out of range for " +
                         x.shape_string());
    auto xd = x.data_ptr();
    return finish(tape, {1}, {x.at(flat)}, {x}, [xd, flat](TensorData& o) {
        xd->ensure_grad();
        xd->grad[flat] += o.grad[0];
    });
}

Tensor lookup_row(Tape& tape, const Tensor& table, std::size_t row) {
    require_rank(table, 2, "lookup_row");
    const std::size_t rows = table.shape()[0], cols = table.shape()[1];
    if (row >= rows)
        throw DomainError("lookup_row: row " + std::to_string(row) + " out of range for table " +
                          table.shape_string());
    std::vector<double> out(cols);
    for (std::size_t j = 0; j < cols; ++j) out[j] = table.at(row, j);
    auto td = table.data_ptr();
    return finish(tape, {cols}, std::move(out), {table}, [td, row, cols](TensorData& o) {
        td->ensure_grad();
        for (std::size_t j = 0; j < cols; ++j) td->grad[row * cols + j] += o.grad[j];
    });
}

Tensor stack_rows(Tape& tape, std::span<const Tensor> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no rows");
    const std::size_t cols = rows[0].size();
    std::vector<double> out;
    out.reserve(rows.size() * cols);
    bool needs = false;
    for (const Tensor& r : rows) {
        if (r.rank() != 1 || r.size() != cols)
            throw ShapeError("stack_rows: row shape " + r.shape_string() + " does not match " +
                             rows[0].shape_string());
        out.insert(out.end(), r.values().begin(), r.values().end());
        needs = needs || r.requires_grad();
    }
    std::vector<DataPtr> parts;
    parts.reserve(rows.size());
    for (const Tensor& r : rows) parts.push_back(r.data_ptr());
    auto outd = make_data({rows.size(), cols}, std::move(out), needs && tape.recording());
    Tensor result = detail::TensorAccess::make(outd);
    if (needs && tape.recording()) {
        tape.record(outd, [outd, parts, cols]() {
            for (std::size_t r = 0; r < parts.size(); ++r) {
                if (!parts[r]->requires_grad) continue;
                parts[r]->ensure_grad();
                for (std::size_t j = 0; j < cols; ++j)
                    parts[r]->grad[j] += outd->grad[r * cols + j];
            }
        });
    }
    return result;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t m = parts[0].shape()[0];
    std::size_t total_cols = 0;
    bool needs = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != m)
            throw ShapeError("concat_cols: incompatible part shape " + p.shape_string());
        total_cols += p.shape()[1];
        needs = needs || p.requires_grad();
    }
    std::vector<double> out(m * total_cols);
    std::size_t col0 = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pc; ++j) out[i * total_cols + col0 + j] = p.at(i, j);
        col0 += pc;
    }
    std::vector<DataPtr> pd;
    for (const Tensor& p : parts) pd.push_back(p.data_ptr());
    auto outd = make_data({m, total_cols}, std::move(out), needs && tape.recording());
    Tensor result = detail::TensorAccess::make(outd);
    if (needs && tape.recording()) {
        tape.record(outd, [outd, pd, m, total_cols]() {
            std::size_t col0 = 0;
            for (const auto& p : pd) {
                const std::size_t pc = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            p->grad[i * pc + j] += outd->grad[i * total_cols + col0 + j];
                }
                col0 += pc;
            }
        });
    }
    return result;
}

Tensor concat_scalars(Tape& tape, std::span<const Tensor> scalars) {
    if (scalars.empty()) throw ShapeError("concat_scalars: no inputs");
    std::vector<double> out;
    out.reserve(scalars.size());
    bool needs = false;
    for (const Tensor& s : scalars) {
        if (s.size() != 1)
            throw ShapeError("concat_scalars: element has shape " + s.shape_string());
        out.push_back(s.at(0));
        needs = needs || s.requires_grad();
    }
    std::vector<DataPtr> sd;
    for (const Tensor& s : scalars) sd.push_back(s.data_ptr());
    auto outd = make_data({scalars.size()}, std::move(out), needs && tape.recording());
    Tensor result = detail::TensorAccess::make(outd);
    if (needs && tape.recording()) {
        tape.record(outd, [outd, sd]() {
            for (std::size_t i = 0; i < sd.size(); ++i) {
                if (!sd[i]->requires_grad) continue;
                sd[i]->ensure_grad();
                sd[i]->grad[0] += outd->grad[i];
            }
        });
    }
    return result;
}

Tensor im2col_rows(Tape& tape, const Tensor& x, int w) {
    require_rank(x, 2, "im2col_rows");
    if (w < 1) throw ConfigError("im2col_rows: kernel width must be >= 1");
    const std::size_t f = x.shape()[0], d = x.shape()[1];
    const int offset = (w - 1) / 2;
    std::vector<double> out(f * static_cast<std::size_t>(w) * d, 0.0);
    const std::size_t patch = static_cast<std::size_t>(w) * d;
    for (std::size_t row = 0; row < f; ++row)
        for (int t = 0; t < w; ++t) {
            const int src = static_cast<int>(row) - offset + t;
            if (src < 0 || src >= static_cast<int>(f)) continue;
            for (std::size_t j = 0; j < d; ++j)
                out[row * patch + static_cast<std::size_t>(t) * d + j] =
                    x.at(static_cast<std::size_t>(src), j);
        }
    auto xd = x.data_ptr();
    return finish(tape, {f, patch}, std::move(out), {x}, [xd, f, d, w, offset, patch](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t row = 0; row < f; ++row)
            for (int t = 0; t < w; ++t) {
                const int src = static_cast<int>(row) - offset + t;
                if (src < 0 || src >= static_cast<int>(f)) continue;
                for (std::size_t j = 0; j < d; ++j)
                    xd->grad[static_cast<std::size_t>(src) * d + j] +=
                        o.grad[row * patch + static_cast<std::size_t>(t) * d + j];
            }
    });
}

Tensor maxpool_rows(Tape& tape, const Tensor& x, int width, int stride) {
    require_rank(x, 2, "maxpool_rows");
    if (width < 1 || stride < 1) throw ConfigError("maxpool_rows: width and stride must be >= 1");
    const std::size_t f = x.shape()[0], c = x.shape()[1];
    const std::size_t windows = (f + static_cast<std::size_t>(stride) - 1) / stride;
    std::vector<double> out(windows * c);
    std::vector<std::size_t> argmax(windows * c);
    for (std::size_t wi = 0; wi < windows; ++wi) {
        const std::size_t lo = wi * stride;
        const std::size_t hi = std::min(lo + static_cast<std::size_t>(width), f);
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t best = lo;
            double bv = x.at(lo, j);
            for (std::size_t r = lo + 1; r < hi; ++r) {
                if (x.at(r, j) > bv) {
                    bv = x.at(r, j);
                    best = r;
                }
            }
            out[wi * c + j] = bv;
            argmax[wi * c + j] = best;
        }
    }
    auto xd = x.data_ptr();
    return finish(tape, {windows, c}, std::move(out), {x}, [xd, argmax, c](TensorData& o) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const std::size_t j = i % c;
            xd->grad[argmax[i] * c + j] += o.grad[i];
        }
    });
}

}  // namespace ada
