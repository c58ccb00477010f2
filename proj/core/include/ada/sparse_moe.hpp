// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ada/experts.hpp"
#include "ada/params.hpp"
#include "ada/tensor.hpp"

namespace ada {

struct GateConfig {
    int reduction_ratio = 8;  // first FFN layer shrinks F*D by this factor
    int hidden_dim = 32;      // routing space dimension d
    double jitter_eps = 0.01; // multiplicative input noise half-width, training only
    double tau_min = 0.05;    // temperature floor
};

/// Cosine-similarity router. The input map (flattened) passes a two-layer
/// relu FFN into a hidden state h; scores are cos(h, e_j) / tau against one
/// learnable embedding e_j per choice, with tau = tau_min + softplus(raw) so
/// the temperature stays positive while remaining trainable. During training
/// the input is jittered elementwise by Uniform(1-eps, 1+eps).
class GatingNetwork {
public:
    GatingNetwork() = default;
    GatingNetwork(std::size_t input_dim, std::size_t choices, const GateConfig& config, Rng& rng);

    /// Raw routing scores, one per choice; all in [-1/tau, +1/tau].
    Tensor scores(Tape& tape, const Tensor& input_flat, bool train_mode, Rng* rng) const;

    std::size_t choices() const { return embeddings_.size(); }
    double temperature() const;
    const GateConfig& config() const { return config_; }

    void register_params(ParamRegistry& registry, const std::string& prefix,
                         ParamSet set = ParamSet::gating) const;

    /// Per-example multiply-adds of one scoring pass (FFN matmuls plus the
    /// N hidden-dim dot products; normalization excluded like elsewhere).
    std::int64_t flops_per_example() const;

private:
    GateConfig config_;
    std::size_t input_dim_ = 0;
    Tensor w_reduce_;                 // (input/r) x input
    Tensor w_project_;                // d x (input/r)
    std::vector<Tensor> embeddings_;  // one [d] per choice
    Tensor raw_tau_;                  // [1]
};

/// Sparse routing result for one example.
struct GateDecision {
    std::vector<int> selected;    // expert indices with nonzero weight, ascending
    std::vector<double> weights;  // over all N experts; zeros off-support
};

struct TopKResult {
    Tensor weights;  // [N] tensor on tape: masked softmax, exact zeros off-support
    GateDecision decision;
};

/// Keep the k largest scores (ties broken toward the lower index) and softmax
/// over them; the rest are masked to exact zero.
TopKResult top_k_gate(Tape& tape, const Tensor& scores, int k);

/// k starts at the expert count and decays linearly to k_final over
/// anneal_steps, then stays there.
struct AnnealSchedule {
    int k_start = 1;
    int k_final = 1;
    int anneal_steps = 0;

    int k_at(int step) const;
};

/// Per-batch routing statistics: f = fraction of examples whose argmax score
/// picks each expert, p = batch-mean router probability (full softmax, so the
/// balancing gradient reaches unselected experts too), w = target loads.
struct LoadStats {
    std::vector<double> dispatch_fraction;  // f_j, sums to 1
    std::vector<double> mean_probability;   // P_j
    std::vector<double> target;             // w_j, sums to 1
    int batch_size = 0;
};

/// lambda * N * sum_j f_j * P_j
double load_balance_loss(const LoadStats& stats, double lambda);
/// lambda * sum_j f_j * P_j / w_j, targets strictly positive
double load_distribution_loss(const LoadStats& stats, std::span<const double> targets,
                              double lambda);
/// Tape route of the distribution loss: gradient flows through the mean
/// probability vector only (f is a hard count).
Tensor load_distribution_loss(Tape& tape, const Tensor& mean_probability,
                              std::span<const double> dispatch_fraction,
                              std::span<const double> targets, double lambda);

/// Per-expert example groups plus the bookkeeping to put outputs back.
struct DispatchPlan {
    std::vector<std::vector<int>> groups;  // groups[j] = example indices for expert j
    std::size_t batch_size = 0;
};

DispatchPlan dispatch(std::span<const GateDecision> decisions, std::size_t expert_count);

/// y_i = sum over selected experts of weight_ij * expert_output_j(i), summed
/// in ascending expert order. expert_outputs[j][g] corresponds to
/// plan.groups[j][g]; weight tensors come from top_k_gate.
std::vector<Tensor> combine(Tape& tape, const DispatchPlan& plan,
                            std::span<const std::vector<Tensor>> expert_outputs,
                            std::span<const Tensor> weight_tensors,
                            std::span<const GateDecision> decisions);

struct MoeLayerConfig {
    std::vector<ExpertKind> experts;
    ExpertDims dims;
    GateConfig gate;
    std::vector<double> target_loads;  // empty = uniform
    double norm_eps = 1e-5;
};

struct MoeForward {
    std::vector<Tensor> outputs;          // residual + mixture, normalized
    std::vector<GateDecision> decisions;  // per example
    LoadStats stats;
    Tensor mean_probability;  // [N] on tape, for the load loss
    int max_routed = 0;       // largest per-example nonzero-weight count seen
};

/// One sparsely gated mixture layer over heterogeneous experts with residual
/// connection and post-norm. Forward is a pure function of (parameters,
/// inputs) in eval mode; training mode additionally draws jitter from rng.
class MoeLayer {
public:
    MoeLayer() = default;
    MoeLayer(const MoeLayerConfig& config, Rng& rng);

    MoeForward forward(Tape& tape, std::span<const Tensor> x, std::span<const Tensor> x0,
                       int k, bool train_mode, Rng* rng) const;

    std::size_t expert_count() const { return experts_.size(); }
    const Expert& expert(std::size_t j) const { return *experts_[j]; }
    const GatingNetwork& gate() const { return gate_; }
    const std::vector<double>& target_loads() const { return targets_; }

    /// Gate cost plus the cost of the experts listed in `selected`.
    std::int64_t flops_for(std::span<const int> selected) const;

    void register_params(ParamRegistry& registry, const std::string& prefix) const;
    void reset_eval_counts() const;

private:
    MoeLayerConfig config_;
    std::vector<std::unique_ptr<Expert>> experts_;
    GatingNetwork gate_;
    Tensor norm_gain_, norm_bias_;
    std::vector<double> targets_;
};

}  // namespace ada
