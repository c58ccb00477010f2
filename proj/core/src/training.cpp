// SPDX-License-Identifier: Apache-2.0
#include "ada/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "ada/error.hpp"

namespace ada {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    if (config_.lr == 0.0) return;  // exact freeze, not just a tiny update
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        auto grads = params_[p].grad();
        auto& values = params_[p].mutable_values();
        auto& m = m_[p];
        auto& v = v_[p];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i];
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

TotalLoss total_loss(Tape& tape, const TrainOutput& forward, std::span<const int> labels,
                     double lambda_expert, double lambda_depth) {
    if (forward.predictions.size() != labels.size())
        throw DataError("total_loss: " + std::to_string(forward.predictions.size()) +
                        " predictions vs " + std::to_string(labels.size()) + " labels");
    if (forward.predictions.empty()) throw DataError("total_loss: empty batch");

    // Per-example binary cross-entropy on the clamped sigmoid outputs.
    std::vector<Tensor> terms;
    terms.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Tensor p = clamp(tape, forward.predictions[i], kPredictionClampLo,
                         1.0 - kPredictionClampLo);
        Tensor lp = labels[i] ? log_op(tape, p)
                              : log_op(tape, add_const(tape, scale(tape, p, -1.0), 1.0));
        terms.push_back(lp);
    }
    Tensor ll = scale(tape, mean_all(tape, concat_scalars(tape, terms)), -1.0);

    TotalLoss out;
    out.logloss = ll;
    for (const MoeForward& layer : forward.layer_results) {
        Tensor piece = load_distribution_loss(tape, layer.mean_probability,
                                              layer.stats.dispatch_fraction,
                                              layer.stats.target, 1.0);
        out.expert_aux = out.expert_aux.defined() ? add(tape, out.expert_aux, piece) : piece;
    }
    if (!out.expert_aux.defined()) out.expert_aux = Tensor::scalar(0.0);
    out.depth_aux = load_distribution_loss(tape, forward.depth_mean_probability,
                                           forward.depth_stats.dispatch_fraction,
                                           forward.depth_stats.target, 1.0);
    out.total = add(tape, ll,
                    add(tape, scale(tape, out.expert_aux, lambda_expert),
                        scale(tape, out.depth_aux, lambda_depth)));
    return out;
}

namespace {

/// Reshuffled cycling over a split: yields mini-batches forever, shuffling
/// the order whenever a pass completes.
class BatchCycler {
public:
    BatchCycler(std::size_t n, std::size_t batch, Rng rng)
        : order_(n), batch_(batch), rng_(rng) {
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(std::span<std::size_t>(order_));
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> batch;
        batch.reserve(batch_);
        while (batch.size() < batch_) {
            if (cursor_ == order_.size()) {
                cursor_ = 0;
                rng_.shuffle(std::span<std::size_t>(order_));
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t cursor_ = 0;
    Rng rng_;
};

std::vector<EncodedRecord> gather(const EncodedDataset& data,
                                  std::span<const std::size_t> idx) {
    std::vector<EncodedRecord> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(data[i]);
    return out;
}

std::vector<int> labels_of(std::span<const EncodedRecord> batch) {
    std::vector<int> ys;
    ys.reserve(batch.size());
    for (const auto& r : batch) ys.push_back(r.label);
    return ys;
}

std::string format_batch_ids(std::span<const std::size_t> idx) {
    std::string s;
    for (std::size_t i = 0; i < std::min<std::size_t>(idx.size(), 8); ++i)
        s += (s.empty() ? "" : ",") + std::to_string(idx[i]);
    if (idx.size() > 8) s += ",...";
    return s;
}

}  // namespace

TrainResult bilevel_train(AdaEnsembleModel& model, const EncodedDataset& train_split,
                          const EncodedDataset& val_split, const BiLevelConfig& config,
                          Rng& rng) {
    if (train_split.empty() || val_split.empty())
        throw DataError("bilevel_train: train and validation splits must be nonempty");
    if (config.inner_steps < 1) throw ConfigError("bilevel_train: inner_steps must be >= 1");
    if (config.batch_size < 1) throw ConfigError("bilevel_train: batch_size must be >= 1");
    if (config.max_steps < 0) throw ConfigError("bilevel_train: max_steps must be >= 0");

    Adam opt_weights(model.params().tensors(ParamSet::weights),
                     AdamConfig{config.lr_weights, 0.9, 0.999, 1e-8});
    Adam opt_gating(model.params().tensors(ParamSet::gating),
                    AdamConfig{config.lr_gating, 0.9, 0.999, 1e-8});

    BatchCycler train_batches(train_split.size(),
                              static_cast<std::size_t>(config.batch_size), rng.fork("train order"));
    BatchCycler val_batches(val_split.size(), static_cast<std::size_t>(config.batch_size),
                            rng.fork("val order"));
    Rng jitter = rng.fork("jitter");

    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    int evals_without_improvement = 0;
    int step = 0;
    std::size_t batch_ordinal = 0;

    auto run_phase = [&](std::span<const std::size_t> idx, const EncodedDataset& data,
                         Adam& optimizer, int at_step) {
        ++batch_ordinal;
        const auto batch = gather(data, idx);
        const auto ys = labels_of(batch);
        Tape tape;
        TrainOutput fwd = model.forward_train(tape, batch, at_step, jitter);
        TotalLoss loss =
            total_loss(tape, fwd, ys, config.lambda_expert, config.lambda_depth);
        if (!std::isfinite(loss.total.at(0)))
            throw NumericError("bilevel_train: non-finite loss at batch " +
                               std::to_string(batch_ordinal) + " (examples " +
                               format_batch_ids(idx) + ")");
        model.params().zero_all_grads();
        tape.backward(loss.total);
        optimizer.step();
        HistoryRow row;
        row.total_loss = loss.total.at(0);
        row.logloss = loss.logloss.at(0);
        row.expert_aux = loss.expert_aux.at(0);
        row.depth_aux = loss.depth_aux.at(0);
        row.k = fwd.k_used;
        row.max_routed = fwd.max_routed;
        return row;
    };

    while (step < config.max_steps) {
        // Gating update on a validation mini-batch; weights stay frozen
        // because only the gating optimizer runs.
        run_phase(val_batches.next(), val_split, opt_gating, step);

        for (int inner = 0; inner < config.inner_steps && step < config.max_steps; ++inner) {
            HistoryRow row = run_phase(train_batches.next(), train_split, opt_weights, step);
            ++step;
            row.step = step;

            if (config.eval_every > 0 && step % config.eval_every == 0) {
                EvalReport report = evaluate(model, val_split);
                row.val_logloss = report.logloss;
                row.val_auc = report.auc;
                if (report.logloss < best_val) {
                    best_val = report.logloss;
                    evals_without_improvement = 0;
                } else {
                    ++evals_without_improvement;
                }
            }
            result.history.push_back(row);
            if (config.patience > 0 && evals_without_improvement >= config.patience) {
                result.early_stopped = true;
                break;
            }
        }
        if (result.early_stopped) break;
    }
    result.steps = step;
    result.best_val_logloss = best_val;
    return result;
}

std::string history_header() {
    return "step\ttotal_loss\tlogloss\texpert_aux\tdepth_aux\tk\tmax_routed\tval_logloss\tval_auc";
}

std::string history_row_line(const HistoryRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d\t%.17g\t%.17g\t%.17g\t%.17g\t%d\t%d\t%.17g\t%.17g",
                  row.step, row.total_loss, row.logloss, row.expert_aux, row.depth_aux, row.k,
                  row.max_routed, row.val_logloss, row.val_auc);
    return buf;
}

namespace {

struct InferAccumulator {
    std::vector<double> predictions;
    std::vector<int> labels;
    std::vector<int> exit_depths;
    double flops_sum = 0.0;
    std::vector<std::vector<double>> expert_hits;  // [layer][expert]
    std::vector<double> reached;                   // [layer]
    std::map<std::string, std::size_t> paths;
};

void accumulate(const AdaEnsembleModel& model, InferAccumulator& acc,
                std::span<const EncodedRecord> batch, const InferOutput& out,
                bool collect_paths) {
    const auto layers = model.moe_layers();
    if (acc.expert_hits.empty()) {
        acc.expert_hits.resize(layers.size());
        acc.reached.assign(layers.size(), 0.0);
        for (std::size_t l = 0; l < layers.size(); ++l)
            acc.expert_hits[l].assign(layers[l].expert_count(), 0.0);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        acc.predictions.push_back(out.probabilities[i]);
        acc.labels.push_back(batch[i].label);
        acc.exit_depths.push_back(out.exit_depths[i]);
        acc.flops_sum += static_cast<double>(out.flops[i]);
        std::string path;
        for (int l = 0; l < out.exit_depths[i]; ++l) {
            const auto& selected = out.trace.selected[static_cast<std::size_t>(l)][i];
            acc.reached[static_cast<std::size_t>(l)] += 1.0;
            std::string combo;
            for (int j : selected) {
                acc.expert_hits[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] += 1.0;
                combo += (combo.empty() ? "" : "+") +
                         std::string(layers[static_cast<std::size_t>(l)]
                                         .expert(static_cast<std::size_t>(j))
                                         .name());
            }
            if (collect_paths) path += (path.empty() ? "" : " -> ") + combo;
        }
        if (collect_paths) ++acc.paths[path];
    }
}

std::vector<std::vector<std::string>> expert_name_grid(const AdaEnsembleModel& model) {
    std::vector<std::vector<std::string>> names;
    for (const auto& layer : model.moe_layers()) {
        std::vector<std::string> row;
        for (std::size_t j = 0; j < layer.expert_count(); ++j)
            row.emplace_back(layer.expert(j).name());
        names.push_back(std::move(row));
    }
    return names;
}

std::vector<std::vector<double>> load_fractions(const InferAccumulator& acc) {
    std::vector<std::vector<double>> load(acc.expert_hits.size());
    for (std::size_t l = 0; l < acc.expert_hits.size(); ++l) {
        load[l].assign(acc.expert_hits[l].size(), 0.0);
        for (std::size_t j = 0; j < acc.expert_hits[l].size(); ++j)
            load[l][j] = acc.reached[l] > 0.0 ? acc.expert_hits[l][j] / acc.reached[l] : 0.0;
    }
    return load;
}

}  // namespace

EvalReport evaluate(const AdaEnsembleModel& model, const EncodedDataset& data,
                    bool force_full_depth, int k_override, std::size_t batch_size) {
    if (data.empty()) throw DataError("evaluate: empty dataset");
    InferAccumulator acc;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - start);
        std::span<const EncodedRecord> batch(data.data() + start, count);
        InferOutput out = model.forward_infer(batch, force_full_depth, k_override);
        accumulate(model, acc, batch, out, false);
    }
    EvalReport report;
    report.examples = data.size();
    report.auc = auc(acc.predictions, acc.labels);
    report.logloss = logloss(acc.predictions, acc.labels);
    report.mean_flops = acc.flops_sum / static_cast<double>(data.size());
    report.depth_fractions =
        depth_histogram(acc.exit_depths, static_cast<int>(model.moe_layers().size()));
    report.expert_load = load_fractions(acc);
    report.expert_names = expert_name_grid(model);
    return report;
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "examples   " << examples << "\n";
    os << "AUC        " << auc << "\n";
    os << "LogLoss    " << logloss << "\n";
    os << "FLOPs      " << std::setprecision(1) << mean_flops << " per example (mean)\n\n";
    os << format_depth_histogram(depth_fractions) << "\n";
    for (std::size_t l = 0; l < expert_load.size(); ++l) {
        os << "layer " << (l + 1) << " expert load:";
        for (std::size_t j = 0; j < expert_load[l].size(); ++j) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(2) << expert_load[l][j] * 100.0 << "%";
            os << " " << expert_names[l][j] << "=" << cell.str();
        }
        os << "\n";
    }
    return os.str();
}

std::string EvalReport::to_key_values() const {
    std::ostringstream os;
    char buf[64];
    os << "examples = " << examples << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", auc);
    os << "auc = " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", logloss);
    os << "logloss = " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", mean_flops);
    os << "mean_flops = " << buf << "\n";
    for (std::size_t l = 0; l < depth_fractions.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%.17g", depth_fractions[l]);
        os << "depth_fraction_" << (l + 1) << " = " << buf << "\n";
    }
    for (std::size_t l = 0; l < expert_load.size(); ++l)
        for (std::size_t j = 0; j < expert_load[l].size(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", expert_load[l][j]);
            os << "expert_load_layer" << (l + 1) << "_" << expert_names[l][j] << " = " << buf
               << "\n";
        }
    return os.str();
}

RoutingReport inspect_routing(const AdaEnsembleModel& model, const EncodedDataset& data,
                              int k_override, std::size_t batch_size) {
    if (data.empty()) throw DataError("inspect_routing: empty dataset");
    InferAccumulator acc;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - start);
        std::span<const EncodedRecord> batch(data.data() + start, count);
        InferOutput out = model.forward_infer(batch, false, k_override);
        accumulate(model, acc, batch, out, true);
    }
    RoutingReport report;
    report.examples = data.size();
    report.expert_load = load_fractions(acc);
    report.expert_names = expert_name_grid(model);
    report.depth_fractions =
        depth_histogram(acc.exit_depths, static_cast<int>(model.moe_layers().size()));
    report.top_paths.assign(acc.paths.begin(), acc.paths.end());
    std::sort(report.top_paths.begin(), report.top_paths.end(),
              [](const auto& a, const auto& b) {
                  if (a.second != b.second) return a.second > b.second;
                  return a.first < b.first;
              });
    return report;
}

std::string RoutingReport::to_table() const {
    std::ostringstream os;
    os << "examples: " << examples << "\n\n";
    os << format_depth_histogram(depth_fractions) << "\n";
    os << "expert selection frequency (of examples reaching the layer):\n";
    for (std::size_t l = 0; l < expert_load.size(); ++l) {
        os << "  layer " << (l + 1) << ":";
        for (std::size_t j = 0; j < expert_load[l].size(); ++j) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(2) << expert_load[l][j] * 100.0 << "%";
            os << " " << expert_names[l][j] << "=" << cell.str();
        }
        os << "\n";
    }
    os << "\nexpert combination paths (layer 1 -> exit layer):\n";
    os << "count\tpath\n";
    for (const auto& [path, count] : top_paths) os << count << "\t" << path << "\n";
    return os.str();
}

}  // namespace ada
