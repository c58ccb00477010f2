// SPDX-License-Identifier: Apache-2.0
#include "ada/sparse_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "ada/error.hpp"

namespace ada {

GatingNetwork::GatingNetwork(std::size_t input_dim, std::size_t choices,
                             const GateConfig& config, Rng& rng)
    : config_(config), input_dim_(input_dim) {
    if (input_dim == 0) throw ConfigError("gating: input_dim must be >= 1");
    if (choices == 0) throw ConfigError("gating: at least one choice required");
    if (config.reduction_ratio < 1) throw ConfigError("gating: reduction_ratio must be >= 1");
    if (config.hidden_dim < 1) throw ConfigError("gating: hidden_dim must be >= 1");
    if (config.jitter_eps < 0.0) throw ConfigError("gating: jitter_eps must be >= 0");
    if (config.tau_min <= 0.0) throw ConfigError("gating: tau_min must be > 0");
    const std::size_t reduced =
        std::max<std::size_t>(1, input_dim / static_cast<std::size_t>(config.reduction_ratio));
    const std::size_t d = static_cast<std::size_t>(config.hidden_dim);
    w_reduce_ = Tensor::glorot({reduced, input_dim}, input_dim, reduced, rng);
    w_project_ = Tensor::glorot({d, reduced}, reduced, d, rng);
    for (std::size_t j = 0; j < choices; ++j)
        embeddings_.push_back(Tensor::glorot({d}, d, 1, rng));
    // raw chosen so the initial temperature is exactly 1.0.
    const double raw0 = std::log(std::exp(1.0 - config.tau_min) - 1.0);
    raw_tau_ = Tensor::scalar(raw0, true);
}

Tensor GatingNetwork::scores(Tape& tape, const Tensor& input_flat, bool train_mode,
                             Rng* rng) const {
    if (input_flat.rank() != 1 || input_flat.size() != input_dim_)
        throw ShapeError("gating: expected flat input of length " + std::to_string(input_dim_) +
                         ", got " + input_flat.shape_string());
    Tensor gate_in = input_flat;
    if (train_mode && config_.jitter_eps > 0.0) {
        if (!rng) throw ConfigError("gating: training mode needs an rng for jitter");
        std::vector<double> noise(input_dim_);
        for (double& v : noise)
            v = rng->uniform(1.0 - config_.jitter_eps, 1.0 + config_.jitter_eps);
        gate_in = hadamard(tape, gate_in, Tensor::from({input_dim_}, std::move(noise)));
    }
    Tensor hidden = matvec(tape, w_project_, relu(tape, matvec(tape, w_reduce_, gate_in)));
    Tensor hidden_unit = l2_normalize(tape, hidden);
    std::vector<Tensor> sims;
    sims.reserve(embeddings_.size());
    for (const Tensor& e : embeddings_)
        sims.push_back(dot(tape, hidden_unit, l2_normalize(tape, e)));
    Tensor cos_scores = concat_scalars(tape, sims);
    Tensor tau = add_const(tape, softplus(tape, raw_tau_), config_.tau_min);
    return scalar_div(tape, cos_scores, tau);
}

double GatingNetwork::temperature() const {
    const double raw = raw_tau_.at(0);
    return config_.tau_min + (std::max(raw, 0.0) + std::log1p(std::exp(-std::abs(raw))));
}

void GatingNetwork::register_params(ParamRegistry& registry, const std::string& prefix,
                                    ParamSet set) const {
    registry.add(prefix + ".w_reduce", w_reduce_, set);
    registry.add(prefix + ".w_project", w_project_, set);
    for (std::size_t j = 0; j < embeddings_.size(); ++j)
        registry.add(prefix + ".embed" + std::to_string(j), embeddings_[j], set);
    registry.add(prefix + ".raw_tau", raw_tau_, set);
}

std::int64_t GatingNetwork::flops_per_example() const {
    const std::int64_t input = static_cast<std::int64_t>(input_dim_);
    const std::int64_t reduced = static_cast<std::int64_t>(w_reduce_.shape()[0]);
    const std::int64_t d = config_.hidden_dim;
    const std::int64_t n = static_cast<std::int64_t>(embeddings_.size());
    return 2 * input * reduced + 2 * reduced * d + 2 * n * d;
}

TopKResult top_k_gate(Tape& tape, const Tensor& scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 1 || k > n)
        throw ConfigError("top_k_gate: k " + std::to_string(k) + " out of range 1.." +
                          std::to_string(n));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores.at(a) != scores.at(b)) return scores.at(a) > scores.at(b);
        return a < b;  // tie toward the lower expert index
    });
    std::vector<bool> keep(static_cast<std::size_t>(n), false);
    for (int i = 0; i < k; ++i) keep[static_cast<std::size_t>(order[i])] = true;

    TopKResult result;
    result.weights = softmax_masked(tape, scores, &keep);
    for (int j = 0; j < n; ++j)
        if (keep[static_cast<std::size_t>(j)]) result.decision.selected.push_back(j);
    result.decision.weights.assign(result.weights.values().begin(),
                                   result.weights.values().end());
    return result;
}

int AnnealSchedule::k_at(int step) const {
    if (k_final < 1 || k_start < k_final)
        throw ConfigError("anneal: need k_start >= k_final >= 1");
    if (step <= 0) return k_start;
    if (anneal_steps <= 0 || step >= anneal_steps) return k_final;
    const int span = k_start - k_final;
    return k_start - (span * step) / anneal_steps;
}

double load_balance_loss(const LoadStats& stats, double lambda) {
    if (stats.batch_size < 1) throw DomainError("load_balance_loss: empty batch");
    const std::size_t n = stats.dispatch_fraction.size();
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        acc += stats.dispatch_fraction[j] * stats.mean_probability[j];
    return lambda * static_cast<double>(n) * acc;
}

double load_distribution_loss(const LoadStats& stats, std::span<const double> targets,
                              double lambda) {
    if (stats.batch_size < 1) throw DomainError("load_distribution_loss: empty batch");
    const std::size_t n = stats.dispatch_fraction.size();
    if (targets.size() != n)
        throw ConfigError("load_distribution_loss: " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(n) + " experts");
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!(targets[j] > 0.0))
            throw ConfigError("load_distribution_loss: target loads must be positive");
        acc += stats.dispatch_fraction[j] * stats.mean_probability[j] / targets[j];
    }
    return lambda * acc;
}

Tensor load_distribution_loss(Tape& tape, const Tensor& mean_probability,
                              std::span<const double> dispatch_fraction,
                              std::span<const double> targets, double lambda) {
    const std::size_t n = mean_probability.size();
    if (dispatch_fraction.size() != n || targets.size() != n)
        throw ConfigError("load_distribution_loss: size mismatch");
    std::vector<double> coeff(n);
    for (std::size_t j = 0; j < n; ++j) {
        if (!(targets[j] > 0.0))
            throw ConfigError("load_distribution_loss: target loads must be positive");
        coeff[j] = lambda * dispatch_fraction[j] / targets[j];
    }
    return dot(tape, Tensor::from({n}, std::move(coeff)), mean_probability);
}

DispatchPlan dispatch(std::span<const GateDecision> decisions, std::size_t expert_count) {
    DispatchPlan plan;
    plan.batch_size = decisions.size();
    plan.groups.resize(expert_count);
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        for (int j : decisions[i].selected) {
            if (j < 0 || static_cast<std::size_t>(j) >= expert_count)
                throw InternalError("dispatch: expert index " + std::to_string(j) +
                                    " out of range");
            plan.groups[static_cast<std::size_t>(j)].push_back(static_cast<int>(i));
        }
    }
    return plan;
}

std::vector<Tensor> combine(Tape& tape, const DispatchPlan& plan,
                            std::span<const std::vector<Tensor>> expert_outputs,
                            std::span<const Tensor> weight_tensors,
                            std::span<const GateDecision> decisions) {
    if (expert_outputs.size() != plan.groups.size())
        throw InternalError("combine: expert output group count does not match plan");
    if (weight_tensors.size() != plan.batch_size || decisions.size() != plan.batch_size)
        throw InternalError("combine: batch bookkeeping mismatch");
    std::vector<Tensor> combined(plan.batch_size);
    for (std::size_t j = 0; j < plan.groups.size(); ++j) {
        const auto& group = plan.groups[j];
        if (group.size() != expert_outputs[j].size())
            throw InternalError("combine: expert " + std::to_string(j) + " produced " +
                                std::to_string(expert_outputs[j].size()) + " outputs for " +
                                std::to_string(group.size()) + " examples");
        for (std::size_t g = 0; g < group.size(); ++g) {
            const std::size_t i = static_cast<std::size_t>(group[g]);
            Tensor w_ij = at_index(tape, weight_tensors[i], j);
            Tensor term = scalar_mul(tape, w_ij, expert_outputs[j][g]);
            combined[i] = combined[i].defined() ? add(tape, combined[i], term) : term;
        }
    }
    for (std::size_t i = 0; i < combined.size(); ++i)
        if (!combined[i].defined())
            throw InternalError("combine: example " + std::to_string(i) + " has no expert");
    return combined;
}

MoeLayer::MoeLayer(const MoeLayerConfig& config, Rng& rng) : config_(config) {
    if (config.experts.empty()) throw ConfigError("moe layer: at least one expert required");
    std::set<ExpertKind> seen;
    for (ExpertKind kind : config.experts)
        if (!seen.insert(kind).second)
            throw ConfigError("moe layer: expert kind '" +
                              std::string(expert_kind_name(kind)) + "' listed twice");
    for (ExpertKind kind : config.experts)
        experts_.push_back(make_expert(kind, config.dims, rng));

    const std::size_t n = experts_.size();
    if (config.target_loads.empty()) {
        targets_.assign(n, 1.0 / static_cast<double>(n));
    } else {
        if (config.target_loads.size() != n)
            throw ConfigError("moe layer: " + std::to_string(config.target_loads.size()) +
                              " target loads for " + std::to_string(n) + " experts");
        double sum = 0.0;
        for (double w : config.target_loads) {
            if (!(w > 0.0)) throw ConfigError("moe layer: target loads must be positive");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw ConfigError("moe layer: target loads must sum to 1, got " + std::to_string(sum));
        targets_ = config.target_loads;
    }

    const std::size_t fd =
        static_cast<std::size_t>(config.dims.fields) * config.dims.embedding_dim;
    gate_ = GatingNetwork(fd, n, config.gate, rng);
    const std::vector<std::size_t> map_shape = {static_cast<std::size_t>(config.dims.fields),
                                                static_cast<std::size_t>(config.dims.embedding_dim)};
    norm_gain_ = Tensor::full(map_shape, 1.0, true);
    norm_bias_ = Tensor::zeros(map_shape, true);
}

MoeForward MoeLayer::forward(Tape& tape, std::span<const Tensor> x, std::span<const Tensor> x0,
                             int k, bool train_mode, Rng* rng) const {
    if (x.size() != x0.size())
        throw ShapeError("moe layer: batch and raw-map batch differ in length");
    const std::size_t n = experts_.size();
    MoeForward fwd;
    fwd.stats.dispatch_fraction.assign(n, 0.0);
    fwd.stats.target = targets_;
    fwd.stats.batch_size = static_cast<int>(x.size());
    if (x.empty()) {
        fwd.stats.mean_probability.assign(n, 0.0);
        return fwd;
    }

    std::vector<Tensor> weight_tensors;
    weight_tensors.reserve(x.size());
    Tensor prob_sum;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor s = gate_.scores(tape, flatten(tape, x0[i]), train_mode, rng);
        // Hard dispatch count: argmax of the scores, ties toward lower index.
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (s.at(j) > s.at(best)) best = j;
        fwd.stats.dispatch_fraction[best] += 1.0;

        Tensor full_prob = softmax(tape, s);
        prob_sum = prob_sum.defined() ? add(tape, prob_sum, full_prob) : full_prob;

        TopKResult gate_out = top_k_gate(tape, s, k);
        fwd.max_routed =
            std::max(fwd.max_routed, static_cast<int>(gate_out.decision.selected.size()));
        weight_tensors.push_back(gate_out.weights);
        fwd.decisions.push_back(std::move(gate_out.decision));
    }
    for (double& f : fwd.stats.dispatch_fraction) f /= static_cast<double>(x.size());
    fwd.mean_probability = scale(tape, prob_sum, 1.0 / static_cast<double>(x.size()));
    fwd.stats.mean_probability.assign(fwd.mean_probability.values().begin(),
                                      fwd.mean_probability.values().end());

    DispatchPlan plan = dispatch(fwd.decisions, n);
    std::vector<std::vector<Tensor>> outputs(n);
    for (std::size_t j = 0; j < n; ++j) {
        outputs[j].reserve(plan.groups[j].size());
        for (int i : plan.groups[j])
            outputs[j].push_back(experts_[j]->forward(tape, x[static_cast<std::size_t>(i)],
                                                      x0[static_cast<std::size_t>(i)]));
    }
    std::vector<Tensor> mixture = combine(tape, plan, outputs, weight_tensors, fwd.decisions);

    fwd.outputs.reserve(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        fwd.outputs.push_back(layer_norm(tape, add(tape, x[i], mixture[i]), norm_gain_,
                                         norm_bias_, config_.norm_eps));
    return fwd;
}

std::int64_t MoeLayer::flops_for(std::span<const int> selected) const {
    std::int64_t total = gate_.flops_per_example();
    for (int j : selected) total += experts_[static_cast<std::size_t>(j)]->flops_per_example();
    return total;
}

void MoeLayer::register_params(ParamRegistry& registry, const std::string& prefix) const {
    for (std::size_t j = 0; j < experts_.size(); ++j)
        experts_[j]->register_params(
            registry, prefix + ".expert_" + std::string(experts_[j]->name()));
    gate_.register_params(registry, prefix + ".gate", ParamSet::gating);
    registry.add(prefix + ".norm_gain", norm_gain_, ParamSet::weights);
    registry.add(prefix + ".norm_bias", norm_bias_, ParamSet::weights);
}

void MoeLayer::reset_eval_counts() const {
    for (const auto& e : experts_) e->reset_eval_count();
}

}  // namespace ada
