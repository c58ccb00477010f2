// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ada/sparse_moe.hpp"
#include "ada/tensor.hpp"

namespace ada {

/// Per-depth prediction head: sigmoid of one affine map over the flattened
/// feature map. Output is strictly inside (0, 1) for finite inputs.
class Estimator {
public:
    Estimator() = default;
    Estimator(std::size_t input_dim, Rng& rng);

    Tensor predict(Tape& tape, const Tensor& feature_map) const;

    std::int64_t flops_per_example() const;
    void register_params(ParamRegistry& registry, const std::string& prefix) const;

private:
    Tensor weights_;  // [F*D]
    Tensor bias_;     // [1]
};

/// Exit assignment for one example. Inference keeps only the top-1 depth;
/// training keeps the full probability vector over depths 1..L.
struct DepthPlan {
    int exit_depth = 1;                // 1-based
    std::vector<double> probabilities; // over depths; empty outside training
};

/// The depth-selecting network: the same cosine gating pipeline as the expert
/// gates, with one embedding per depth. Training keeps all L probabilities
/// (dense softmax); inference takes the argmax, ties toward the shallower
/// depth.
class DepthGatingNetwork {
public:
    DepthGatingNetwork() = default;
    DepthGatingNetwork(std::size_t input_dim, std::size_t depths, const GateConfig& config,
                       Rng& rng);

    /// Probability vector over the L depths (softmax of all scores).
    Tensor probabilities(Tape& tape, const Tensor& input_flat, bool train_mode, Rng* rng) const;
    /// Full plan: argmax depth plus the probability vector.
    DepthPlan plan(Tape& tape, const Tensor& input_flat, bool train_mode, Rng* rng) const;

    std::size_t depth_count() const { return gate_.choices(); }
    std::int64_t flops_per_example() const { return gate_.flops_per_example(); }
    void register_params(ParamRegistry& registry, const std::string& prefix) const;

private:
    GatingNetwork gate_;
};

/// Per-layer expert selections gathered during propagation. selected[l][i]
/// lists the experts example i used at layer l; empty when the example exited
/// before reaching l.
struct PropagationTrace {
    std::vector<std::vector<std::vector<int>>> selected;
};

/// Run the layer stack with per-example early exit: an example whose plan is
/// depth l passes layers 1..l and exits through estimator l; everyone still
/// alive at depth L exits there. Outputs are restored to the original batch
/// order. Batched recursion over the keep/exit split; equivalent to running
/// each example independently to its own depth.
std::vector<double> dynamic_propagation(Tape& tape, std::span<const Tensor> x0,
                                        std::span<const int> exit_depths,
                                        std::span<const MoeLayer> layers,
                                        std::span<const Estimator> estimators, int k,
                                        bool train_mode = false, Rng* rng = nullptr,
                                        PropagationTrace* trace = nullptr);

/// Differentiable training surrogate: every example runs the full stack and
/// the prediction is the depth-probability mixture of the per-depth
/// estimators. Collapses to dynamic_propagation when the probabilities are
/// one-hot.
struct SoftDepthForward {
    std::vector<Tensor> predictions;       // per example, [1] in (0,1)
    std::vector<MoeForward> layer_results; // per layer
};
SoftDepthForward soft_depth_forward(Tape& tape, std::span<const Tensor> x0,
                                    std::span<const Tensor> depth_probabilities,
                                    std::span<const MoeLayer> layers,
                                    std::span<const Estimator> estimators, int k,
                                    bool train_mode, Rng* rng);

/// Fraction of examples exiting at each depth 1..L; sums to 1.
std::vector<double> depth_histogram(std::span<const int> exit_depths, int depth_count);

/// Table-style rendering: one header row "Layer 1 ... Layer L" and one row of
/// percentage fractions.
std::string format_depth_histogram(std::span<const double> fractions);

}  // namespace ada
