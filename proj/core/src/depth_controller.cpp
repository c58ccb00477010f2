// SPDX-License-Identifier: Apache-2.0
#include "ada/depth_controller.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "ada/error.hpp"

namespace ada {

Estimator::Estimator(std::size_t input_dim, Rng& rng) {
    weights_ = Tensor::glorot({input_dim}, input_dim, 1, rng);
    bias_ = Tensor::zeros({1}, true);
}

Tensor Estimator::predict(Tape& tape, const Tensor& feature_map) const {
    Tensor flat = flatten(tape, feature_map);
    if (flat.size() != weights_.size())
        throw ShapeError("estimator: feature map " + feature_map.shape_string() +
                         " does not match aggregation vector of length " +
                         std::to_string(weights_.size()));
    Tensor logit = add(tape, dot(tape, weights_, flat), bias_);
    // A saturating logit would round the double-precision sigmoid to exactly
    // 0 or 1; keep the head inside the open interval.
    return clamp(tape, sigmoid(tape, logit), 1e-12, 1.0 - 1e-12);
}

std::int64_t Estimator::flops_per_example() const {
    return 2 * static_cast<std::int64_t>(weights_.size());
}

void Estimator::register_params(ParamRegistry& registry, const std::string& prefix) const {
    registry.add(prefix + ".w", weights_, ParamSet::weights);
    registry.add(prefix + ".b", bias_, ParamSet::weights);
}

DepthGatingNetwork::DepthGatingNetwork(std::size_t input_dim, std::size_t depths,
                                       const GateConfig& config, Rng& rng)
    : gate_(input_dim, depths, config, rng) {}

Tensor DepthGatingNetwork::probabilities(Tape& tape, const Tensor& input_flat, bool train_mode,
                                         Rng* rng) const {
    return softmax(tape, gate_.scores(tape, input_flat, train_mode, rng));
}

DepthPlan DepthGatingNetwork::plan(Tape& tape, const Tensor& input_flat, bool train_mode,
                                   Rng* rng) const {
    Tensor probs = probabilities(tape, input_flat, train_mode, rng);
    DepthPlan p;
    p.probabilities.assign(probs.values().begin(), probs.values().end());
    std::size_t best = 0;
    for (std::size_t l = 1; l < p.probabilities.size(); ++l)
        if (p.probabilities[l] > p.probabilities[best]) best = l;
    p.exit_depth = static_cast<int>(best) + 1;
    return p;
}

void DepthGatingNetwork::register_params(ParamRegistry& registry,
                                         const std::string& prefix) const {
    gate_.register_params(registry, prefix, ParamSet::gating);
}

namespace {

/// One recursion level of the early-exit dispatcher. `indices` maps the local
/// batch back to original positions so Combine restores order exactly.
void propagate(Tape& tape, std::vector<Tensor> current, std::vector<Tensor> raw,
               std::vector<std::size_t> indices, std::span<const int> exit_depths,
               std::span<const MoeLayer> layers, std::span<const Estimator> estimators,
               int depth, int k, bool train_mode, Rng* rng, std::vector<double>& out,
               PropagationTrace* trace) {
    if (indices.empty()) return;
    const std::size_t layer_idx = static_cast<std::size_t>(depth - 1);
    MoeForward fwd = layers[layer_idx].forward(tape, current, raw, k, train_mode, rng);
    if (trace)
        for (std::size_t i = 0; i < indices.size(); ++i)
            trace->selected[layer_idx][indices[i]] = fwd.decisions[i].selected;

    if (depth == static_cast<int>(layers.size())) {
        for (std::size_t i = 0; i < indices.size(); ++i)
            out[indices[i]] = estimators[layer_idx].predict(tape, fwd.outputs[i]).at(0);
        return;
    }

    std::vector<Tensor> keep_x, keep_raw;
    std::vector<std::size_t> keep_idx;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (exit_depths[indices[i]] == depth) {
            out[indices[i]] = estimators[layer_idx].predict(tape, fwd.outputs[i]).at(0);
        } else {
            keep_x.push_back(fwd.outputs[i]);
            keep_raw.push_back(raw[i]);
            keep_idx.push_back(indices[i]);
        }
    }
    propagate(tape, std::move(keep_x), std::move(keep_raw), std::move(keep_idx), exit_depths,
              layers, estimators, depth + 1, k, train_mode, rng, out, trace);
}

}  // namespace

std::vector<double> dynamic_propagation(Tape& tape, std::span<const Tensor> x0,
                                        std::span<const int> exit_depths,
                                        std::span<const MoeLayer> layers,
                                        std::span<const Estimator> estimators, int k,
                                        bool train_mode, Rng* rng, PropagationTrace* trace) {
    if (layers.empty()) throw ConfigError("dynamic_propagation: no layers");
    if (layers.size() != estimators.size())
        throw ConfigError("dynamic_propagation: layer/estimator count mismatch");
    if (x0.size() != exit_depths.size())
        throw ShapeError("dynamic_propagation: batch and plan lengths differ");
    const int max_depth = static_cast<int>(layers.size());
    for (int d : exit_depths)
        if (d < 1 || d > max_depth)
            throw DomainError("dynamic_propagation: plan depth " + std::to_string(d) +
                              " outside 1.." + std::to_string(max_depth));
    if (trace)
        trace->selected.assign(layers.size(),
                               std::vector<std::vector<int>>(x0.size()));

    std::vector<double> out(x0.size(), 0.0);
    std::vector<Tensor> current(x0.begin(), x0.end());
    std::vector<Tensor> raw(x0.begin(), x0.end());
    std::vector<std::size_t> indices(x0.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    propagate(tape, std::move(current), std::move(raw), std::move(indices), exit_depths, layers,
              estimators, 1, k, train_mode, rng, out, trace);
    return out;
}

SoftDepthForward soft_depth_forward(Tape& tape, std::span<const Tensor> x0,
                                    std::span<const Tensor> depth_probabilities,
                                    std::span<const MoeLayer> layers,
                                    std::span<const Estimator> estimators, int k,
                                    bool train_mode, Rng* rng) {
    if (layers.empty()) throw ConfigError("soft_depth_forward: no layers");
    if (layers.size() != estimators.size())
        throw ConfigError("soft_depth_forward: layer/estimator count mismatch");
    if (x0.size() != depth_probabilities.size())
        throw ShapeError("soft_depth_forward: batch and probability lengths differ");
    for (const Tensor& p : depth_probabilities)
        if (p.size() != layers.size())
            throw ShapeError("soft_depth_forward: probability vector " + p.shape_string() +
                             " does not cover " + std::to_string(layers.size()) + " depths");

    SoftDepthForward result;
    result.predictions.resize(x0.size());
    std::vector<Tensor> current(x0.begin(), x0.end());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        MoeForward fwd = layers[l].forward(tape, current, x0, k, train_mode, rng);
        for (std::size_t i = 0; i < x0.size(); ++i) {
            Tensor head = estimators[l].predict(tape, fwd.outputs[i]);
            Tensor mass = at_index(tape, depth_probabilities[i], l);
            Tensor term = scalar_mul(tape, mass, head);
            result.predictions[i] =
                result.predictions[i].defined() ? add(tape, result.predictions[i], term) : term;
        }
        current = fwd.outputs;
        result.layer_results.push_back(std::move(fwd));
    }
    return result;
}

std::vector<double> depth_histogram(std::span<const int> exit_depths, int depth_count) {
    if (exit_depths.empty()) throw DomainError("depth_histogram: empty dataset");
    if (depth_count < 1) throw ConfigError("depth_histogram: depth_count must be >= 1");
    std::vector<double> fractions(static_cast<std::size_t>(depth_count), 0.0);
    for (int d : exit_depths) {
        if (d < 1 || d > depth_count)
            throw DomainError("depth_histogram: depth " + std::to_string(d) + " outside 1.." +
                              std::to_string(depth_count));
        fractions[static_cast<std::size_t>(d - 1)] += 1.0;
    }
    for (double& f : fractions) f /= static_cast<double>(exit_depths.size());
    return fractions;
}

std::string format_depth_histogram(std::span<const double> fractions) {
    std::ostringstream head, row;
    head << std::left << std::setw(10) << "";
    row << std::left << std::setw(10) << "Fraction";
    for (std::size_t l = 0; l < fractions.size(); ++l) {
        head << std::setw(10) << ("Layer " + std::to_string(l + 1));
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(2) << fractions[l] * 100.0 << "%";
        row << std::setw(10) << cell.str();
    }
    return head.str() + "\n" + row.str() + "\n";
}

}  // namespace ada
