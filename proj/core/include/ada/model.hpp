// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ada/depth_controller.hpp"
#include "ada/features.hpp"
#include "ada/params.hpp"
#include "ada/sparse_moe.hpp"

namespace ada {

struct ModelConfig {
    int fields = 0;         // F; filled from the fitted pipeline
    int embedding_dim = 8;  // D
    int layers = 1;         // L

    /// Expert kinds per layer. A single entry is replicated across layers.
    std::vector<std::vector<ExpertKind>> layer_experts;

    int dense_hidden = 0;  // 0 = 4*F*D
    int conv_kernel = 3;
    int conv_channels = 0;  // 0 = D
    int attention_heads = 2;

    int k_final = 1;
    int anneal_steps = 0;
    GateConfig gate;

    std::vector<double> expert_target_loads;  // empty = uniform, shared by all layers
    std::vector<double> depth_target_loads;   // empty = uniform
    double norm_eps = 1e-5;

    void validate() const;
    ExpertDims expert_dims() const;
    std::size_t expert_count(std::size_t layer) const { return layer_experts[layer].size(); }
    int min_expert_count() const;
    int max_expert_count() const;
    AnnealSchedule anneal_schedule() const;

    /// Key-value echo (round-trippable through parse_echo).
    std::string to_echo() const;
    static ModelConfig parse_echo(const std::string& text);
};

struct TrainOutput {
    std::vector<Tensor> predictions;        // per example, [1] in (0,1)
    std::vector<MoeForward> layer_results;  // stats + mean probability per layer
    Tensor depth_mean_probability;          // [L] on tape
    LoadStats depth_stats;
    int k_used = 0;
    int max_routed = 0;
};

struct InferOutput {
    std::vector<double> probabilities;
    std::vector<int> exit_depths;       // 1-based
    std::vector<std::int64_t> flops;    // multiply-adds actually executed
    PropagationTrace trace;
};

/// Embedding -> L sparse MoE layers -> per-depth estimators, with the
/// depth-selecting gate deciding each example's exit. Trainable tensors are
/// split into the weights set (experts, estimators, embeddings, norms) and
/// the gating set (expert gates, depth gate) for the alternating optimizer.
///
/// In eval mode the model is immutable (apart from the experts' debug
/// eval counters) and may be shared across threads; training holds exclusive
/// mutation rights. Never train and evaluate one instance concurrently.
class AdaEnsembleModel {
public:
    static AdaEnsembleModel init(ModelConfig config, FeaturePipeline pipeline, Rng& rng);

    /// Training forward: jitter on, dense depth mixture, k from the anneal
    /// schedule at `step` (clamped per layer to its expert count).
    TrainOutput forward_train(Tape& tape, std::span<const EncodedRecord> batch, int step,
                              Rng& rng) const;

    /// Inference forward: deterministic, no jitter, hard top-1 depth and hard
    /// top-k experts. force_full_depth sends every example to depth L without
    /// consulting (or paying for) the depth gate. k_override > 0 replaces
    /// k_final for the expert gates.
    InferOutput forward_infer(std::span<const EncodedRecord> batch, bool force_full_depth = false,
                              int k_override = -1) const;

    void save(const std::string& path) const;
    static AdaEnsembleModel load(const std::string& path);

    const ModelConfig& config() const { return config_; }
    const FeaturePipeline& pipeline() const { return pipeline_; }
    const ParamRegistry& params() const { return params_; }
    ParamRegistry& params() { return params_; }
    std::span<const MoeLayer> moe_layers() const { return layers_; }
    const EmbeddingTable& embeddings() const { return embeddings_; }
    const DepthGatingNetwork& depth_gate() const { return depth_gate_; }
    std::span<const Estimator> estimators() const { return estimators_; }

    void reset_eval_counts() const;

private:
    AdaEnsembleModel() = default;
    void register_all_params();

    ModelConfig config_;
    FeaturePipeline pipeline_;
    EmbeddingTable embeddings_;
    std::vector<MoeLayer> layers_;
    std::vector<Estimator> estimators_;
    DepthGatingNetwork depth_gate_;
    ParamRegistry params_;
};

}  // namespace ada
