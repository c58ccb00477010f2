// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ada/params.hpp"
#include "ada/tensor.hpp"

namespace ada {

enum class ExpertKind { dense, conv, attention, pin, cross };

std::string_view expert_kind_name(ExpertKind kind);
ExpertKind expert_kind_from_name(std::string_view name);

/// Dimension settings shared by the expert constructors. Unused knobs are
/// ignored per kind.
struct ExpertDims {
    int fields = 0;          // F
    int embedding_dim = 0;   // D
    int dense_hidden = 0;    // H; 0 picks the default 4*F*D
    int conv_kernel = 3;     // window over the field axis
    int conv_channels = 0;   // 0 picks D
    int attention_heads = 2;

    int dense_hidden_or_default() const;
    int conv_channels_or_default() const;
};

/// Multiply-add count of one expert evaluation, from the documented formulas:
/// a matmul [m x k]*[k x n] costs 2*m*k*n (multiplies and accumulating adds
/// both counted), an elementwise product or bias add costs 1 per element.
/// Activations, pooling comparisons and normalization are excluded.
///
///   dense:      2*(F*D*H) + 2*(H*F*D)
///   conv:       2*F*(w*D)*C + 2*(ceil(F/2)*C)*(F*D)
///   attention:  8*F*D*D + 4*F*F*D   (Q/K/V/output projections + score and
///                                     mixing matmuls across all heads)
///   pin:        2*F*F*D + F*D
///   cross:      2*F*F*D + 2*F*D
std::int64_t expert_flops(ExpertKind kind, const ExpertDims& dims);

/// A feature-interaction expert: a shape-preserving map from an F x D feature
/// map to an F x D feature map. pin and cross additionally consume the raw
/// input map x0. Parameters are immutable during a forward pass; the
/// evaluation counter is bookkeeping for sparsity checks and is not
/// synchronized across threads.
class Expert {
public:
    virtual ~Expert() = default;

    virtual ExpertKind kind() const = 0;
    virtual Tensor forward(Tape& tape, const Tensor& x, const Tensor& x0) const = 0;
    virtual void register_params(ParamRegistry& registry, const std::string& prefix) const = 0;

    std::string_view name() const { return expert_kind_name(kind()); }
    std::int64_t flops_per_example() const { return flops_; }

    std::uint64_t eval_count() const { return eval_count_; }
    void reset_eval_count() { eval_count_ = 0; }

protected:
    void count_eval() const { ++eval_count_; }
    std::int64_t flops_ = 0;

private:
    mutable std::uint64_t eval_count_ = 0;
};

std::unique_ptr<Expert> make_expert(ExpertKind kind, const ExpertDims& dims, Rng& rng);

}  // namespace ada
