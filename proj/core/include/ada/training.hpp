// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ada/metrics.hpp"
#include "ada/model.hpp"

namespace ada {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Standard Adam with bias correction over a fixed tensor list. step() reads
/// each tensor's accumulated gradient and writes updated values in place. A
/// zero learning rate is an exact no-op (parameters stay bit-identical).
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config);

    void step();
    std::int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return config_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
    AdamConfig config_;
};

/// Eq: total = logloss + lambda_expert * sum over layers of the expert
/// distribution losses + lambda_depth * the depth distribution loss. The
/// per-layer inner losses use coefficient 1; the lambdas are applied here.
struct TotalLoss {
    Tensor total;       // [1]
    Tensor logloss;     // [1]
    Tensor expert_aux;  // [1], pre-lambda sum over layers
    Tensor depth_aux;   // [1], pre-lambda
};
TotalLoss total_loss(Tape& tape, const TrainOutput& forward, std::span<const int> labels,
                     double lambda_expert, double lambda_depth);

struct BiLevelConfig {
    int inner_steps = 4;  // weight updates per gating update
    double lr_weights = 1e-3;
    double lr_gating = 1e-3;
    int batch_size = 256;
    int max_steps = 1000;  // counted in weight updates
    int eval_every = 100;  // validation metric cadence, in weight updates
    int patience = 10;     // evaluations without improvement before stopping
    double lambda_expert = 0.01;  // lambda1
    double lambda_depth = 0.01;   // lambda2
};

struct HistoryRow {
    int step = 0;
    double total_loss = 0.0;
    double logloss = 0.0;
    double expert_aux = 0.0;
    double depth_aux = 0.0;
    int k = 0;
    int max_routed = 0;
    double val_logloss = std::numeric_limits<double>::quiet_NaN();
    double val_auc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    std::vector<HistoryRow> history;
    int steps = 0;
    bool early_stopped = false;
    double best_val_logloss = std::numeric_limits<double>::quiet_NaN();
};

/// Alternating first-order bi-level loop: each outer round updates the gating
/// set once on a validation mini-batch (weights frozen), then the weights set
/// `inner_steps` times on training mini-batches (gating frozen). Mini-batches
/// cycle through reshuffled permutations of their split. Stops at max_steps
/// or when validation logloss fails to improve `patience` evaluations in a
/// row. Deterministic given (model state, data, config, rng seed).
TrainResult bilevel_train(AdaEnsembleModel& model, const EncodedDataset& train_split,
                          const EncodedDataset& val_split, const BiLevelConfig& config,
                          Rng& rng);

std::string history_header();
std::string history_row_line(const HistoryRow& row);

struct EvalReport {
    std::size_t examples = 0;
    double auc = 0.0;
    double logloss = 0.0;
    double mean_flops = 0.0;
    std::vector<double> depth_fractions;             // sums to 1
    std::vector<std::vector<double>> expert_load;    // [layer][expert], of reaching examples
    std::vector<std::vector<std::string>> expert_names;  // [layer][expert]

    std::string to_table() const;
    std::string to_key_values() const;
};

/// One deterministic eval pass; metrics match the standalone logloss/auc
/// applied to the dumped predictions.
EvalReport evaluate(const AdaEnsembleModel& model, const EncodedDataset& data,
                    bool force_full_depth = false, int k_override = -1,
                    std::size_t batch_size = 512);

/// Expert-combination path statistics for the routing report: one path per
/// example, "pin+cross -> dense" style, counted over the dataset.
struct RoutingReport {
    std::vector<std::vector<double>> expert_load;        // [layer][expert]
    std::vector<std::vector<std::string>> expert_names;  // [layer][expert]
    std::vector<std::pair<std::string, std::size_t>> top_paths;  // sorted by count desc
    std::vector<double> depth_fractions;
    std::size_t examples = 0;

    std::string to_table() const;
};
RoutingReport inspect_routing(const AdaEnsembleModel& model, const EncodedDataset& data,
                              int k_override = -1, std::size_t batch_size = 512);

}  // namespace ada
