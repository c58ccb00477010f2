// SPDX-License-Identifier: Apache-2.0
#include "ada/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ada/checkpoint.hpp"
#include "ada/error.hpp"
#include "ada/kv.hpp"

namespace ada {

void ModelConfig::validate() const {
    if (fields < 1) throw ConfigError("model: fields must be >= 1");
    if (embedding_dim < 1) throw ConfigError("model: embedding_dim must be >= 1");
    if (layers < 1) throw ConfigError("model: layers must be >= 1");
    if (layer_experts.size() != static_cast<std::size_t>(layers))
        throw ConfigError("model: expert lists cover " + std::to_string(layer_experts.size()) +
                          " layers, expected " + std::to_string(layers));
    for (const auto& experts : layer_experts)
        if (experts.empty()) throw ConfigError("model: every layer needs at least one expert");
    if (k_final < 1 || k_final > min_expert_count())
        throw ConfigError("model: k_final " + std::to_string(k_final) +
                          " outside 1..min expert count " + std::to_string(min_expert_count()));
    if (anneal_steps < 0) throw ConfigError("model: anneal_steps must be >= 0");
    if (!depth_target_loads.empty() &&
        depth_target_loads.size() != static_cast<std::size_t>(layers))
        throw ConfigError("model: depth target loads must cover every layer");
}

ExpertDims ModelConfig::expert_dims() const {
    ExpertDims d;
    d.fields = fields;
    d.embedding_dim = embedding_dim;
    d.dense_hidden = dense_hidden;
    d.conv_kernel = conv_kernel;
    d.conv_channels = conv_channels;
    d.attention_heads = attention_heads;
    return d;
}

int ModelConfig::min_expert_count() const {
    std::size_t m = layer_experts.empty() ? 0 : layer_experts[0].size();
    for (const auto& e : layer_experts) m = std::min(m, e.size());
    return static_cast<int>(m);
}

int ModelConfig::max_expert_count() const {
    std::size_t m = 0;
    for (const auto& e : layer_experts) m = std::max(m, e.size());
    return static_cast<int>(m);
}

AnnealSchedule ModelConfig::anneal_schedule() const {
    return AnnealSchedule{max_expert_count(), k_final, anneal_steps};
}

std::string ModelConfig::to_echo() const {
    KeyValues kv;
    kv.set_int("model.fields", fields);
    kv.set_int("model.embedding_dim", embedding_dim);
    kv.set_int("model.layers", layers);
    for (std::size_t l = 0; l < layer_experts.size(); ++l) {
        std::string names;
        for (ExpertKind k : layer_experts[l])
            names += (names.empty() ? "" : ",") + std::string(expert_kind_name(k));
        kv.set("model.layer" + std::to_string(l) + "_experts", names);
    }
    kv.set_int("model.dense_hidden", dense_hidden);
    kv.set_int("model.conv_kernel", conv_kernel);
    kv.set_int("model.conv_channels", conv_channels);
    kv.set_int("model.attention_heads", attention_heads);
    kv.set_int("model.k_final", k_final);
    kv.set_int("model.anneal_steps", anneal_steps);
    kv.set_int("model.reduction_ratio", gate.reduction_ratio);
    kv.set_int("model.gate_hidden", gate.hidden_dim);
    kv.set_double("model.jitter_eps", gate.jitter_eps);
    kv.set_double("model.tau_min", gate.tau_min);
    kv.set_double("model.norm_eps", norm_eps);
    auto set_loads = [&kv](const std::string& key, const std::vector<double>& loads) {
        std::string text;
        for (double w : loads) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", w);
            text += (text.empty() ? "" : ",") + std::string(buf);
        }
        if (!text.empty()) kv.set(key, text);
    };
    set_loads("model.expert_target_loads", expert_target_loads);
    set_loads("model.depth_target_loads", depth_target_loads);
    return kv.serialize();
}

ModelConfig ModelConfig::parse_echo(const std::string& text) {
    KeyValues kv = KeyValues::parse(text);
    ModelConfig cfg;
    cfg.fields = static_cast<int>(kv.get_int("model.fields", 0));
    cfg.embedding_dim = static_cast<int>(kv.get_int("model.embedding_dim", 8));
    cfg.layers = static_cast<int>(kv.get_int("model.layers", 1));
    for (int l = 0; l < cfg.layers; ++l) {
        std::vector<ExpertKind> kinds;
        for (const auto& name :
             kv.get_list("model.layer" + std::to_string(l) + "_experts"))
            kinds.push_back(expert_kind_from_name(name));
        cfg.layer_experts.push_back(std::move(kinds));
    }
    cfg.dense_hidden = static_cast<int>(kv.get_int("model.dense_hidden", 0));
    cfg.conv_kernel = static_cast<int>(kv.get_int("model.conv_kernel", 3));
    cfg.conv_channels = static_cast<int>(kv.get_int("model.conv_channels", 0));
    cfg.attention_heads = static_cast<int>(kv.get_int("model.attention_heads", 2));
    cfg.k_final = static_cast<int>(kv.get_int("model.k_final", 1));
    cfg.anneal_steps = static_cast<int>(kv.get_int("model.anneal_steps", 0));
    cfg.gate.reduction_ratio = static_cast<int>(kv.get_int("model.reduction_ratio", 8));
    cfg.gate.hidden_dim = static_cast<int>(kv.get_int("model.gate_hidden", 32));
    cfg.gate.jitter_eps = kv.get_double("model.jitter_eps", 0.01);
    cfg.gate.tau_min = kv.get_double("model.tau_min", 0.05);
    cfg.norm_eps = kv.get_double("model.norm_eps", 1e-5);
    for (const auto& cell : kv.get_list("model.expert_target_loads"))
        cfg.expert_target_loads.push_back(std::stod(cell));
    for (const auto& cell : kv.get_list("model.depth_target_loads"))
        cfg.depth_target_loads.push_back(std::stod(cell));
    cfg.validate();
    return cfg;
}

AdaEnsembleModel AdaEnsembleModel::init(ModelConfig config, FeaturePipeline pipeline, Rng& rng) {
    config.fields = static_cast<int>(pipeline.schema().field_count());
    config.embedding_dim = static_cast<int>(pipeline.schema().embedding_dim);
    if (config.layer_experts.size() == 1 && config.layers > 1)
        config.layer_experts.resize(static_cast<std::size_t>(config.layers),
                                    config.layer_experts[0]);
    config.validate();

    AdaEnsembleModel model;
    model.config_ = config;
    model.pipeline_ = std::move(pipeline);

    Rng init_rng = rng.fork("init");
    const auto rows = model.pipeline_.rows_per_field();
    model.embeddings_ = EmbeddingTable::init(
        rows, static_cast<std::size_t>(config.embedding_dim), init_rng);

    const std::size_t fd =
        static_cast<std::size_t>(config.fields) * static_cast<std::size_t>(config.embedding_dim);
    for (int l = 0; l < config.layers; ++l) {
        MoeLayerConfig lc;
        lc.experts = config.layer_experts[static_cast<std::size_t>(l)];
        lc.dims = config.expert_dims();
        lc.gate = config.gate;
        lc.target_loads = config.expert_target_loads;
        lc.norm_eps = config.norm_eps;
        model.layers_.emplace_back(lc, init_rng);
        model.estimators_.emplace_back(fd, init_rng);
    }
    model.depth_gate_ = DepthGatingNetwork(fd, static_cast<std::size_t>(config.layers),
                                           config.gate, init_rng);
    model.register_all_params();
    return model;
}

void AdaEnsembleModel::register_all_params() {
    for (std::size_t f = 0; f < embeddings_.tables.size(); ++f)
        params_.add("embed.field" + std::to_string(f), embeddings_.tables[f],
                    ParamSet::weights);
    for (std::size_t l = 0; l < layers_.size(); ++l)
        layers_[l].register_params(params_, "layer" + std::to_string(l));
    for (std::size_t l = 0; l < estimators_.size(); ++l)
        estimators_[l].register_params(params_, "estimator" + std::to_string(l));
    depth_gate_.register_params(params_, "depth_gate");
}

TrainOutput AdaEnsembleModel::forward_train(Tape& tape, std::span<const EncodedRecord> batch,
                                            int step, Rng& rng) const {
    if (batch.empty()) throw DataError("forward_train: empty batch");
    const std::size_t depth_count = layers_.size();

    std::vector<Tensor> x0;
    x0.reserve(batch.size());
    for (const auto& record : batch) x0.push_back(embeddings_.embed(tape, record));

    TrainOutput out;
    out.depth_stats.dispatch_fraction.assign(depth_count, 0.0);
    out.depth_stats.target = config_.depth_target_loads.empty()
                                 ? std::vector<double>(depth_count, 1.0 / depth_count)
                                 : config_.depth_target_loads;
    out.depth_stats.batch_size = static_cast<int>(batch.size());

    std::vector<Tensor> depth_probs;
    depth_probs.reserve(batch.size());
    Tensor prob_sum;
    for (const Tensor& map : x0) {
        Tensor probs = depth_gate_.probabilities(tape, flatten(tape, map), true, &rng);
        std::size_t best = 0;
        for (std::size_t l = 1; l < depth_count; ++l)
            if (probs.at(l) > probs.at(best)) best = l;
        out.depth_stats.dispatch_fraction[best] += 1.0;
        prob_sum = prob_sum.defined() ? add(tape, prob_sum, probs) : probs;
        depth_probs.push_back(probs);
    }
    for (double& f : out.depth_stats.dispatch_fraction) f /= static_cast<double>(batch.size());
    out.depth_mean_probability = scale(tape, prob_sum, 1.0 / static_cast<double>(batch.size()));
    out.depth_stats.mean_probability.assign(out.depth_mean_probability.values().begin(),
                                            out.depth_mean_probability.values().end());

    out.k_used = config_.anneal_schedule().k_at(step);
    SoftDepthForward soft = soft_depth_forward(tape, x0, depth_probs, layers_, estimators_,
                                               out.k_used, true, &rng);
    out.predictions = std::move(soft.predictions);
    out.layer_results = std::move(soft.layer_results);
    for (const auto& lr : out.layer_results) out.max_routed = std::max(out.max_routed, lr.max_routed);
    return out;
}

InferOutput AdaEnsembleModel::forward_infer(std::span<const EncodedRecord> batch,
                                            bool force_full_depth, int k_override) const {
    Tape tape(false);
    const int depth_count = static_cast<int>(layers_.size());
    const int k = k_override > 0 ? k_override : config_.k_final;
    if (k > config_.min_expert_count())
        throw ConfigError("forward_infer: k " + std::to_string(k) + " exceeds expert count " +
                          std::to_string(config_.min_expert_count()));

    std::vector<Tensor> x0;
    x0.reserve(batch.size());
    for (const auto& record : batch) x0.push_back(embeddings_.embed(tape, record));

    InferOutput out;
    out.exit_depths.resize(batch.size(), depth_count);
    if (!force_full_depth) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            DepthPlan plan = depth_gate_.plan(tape, flatten(tape, x0[i]), false, nullptr);
            out.exit_depths[i] = plan.exit_depth;
        }
    }

    out.probabilities = dynamic_propagation(tape, x0, out.exit_depths, layers_, estimators_, k,
                                            false, nullptr, &out.trace);

    out.flops.resize(batch.size(), 0);
    const std::int64_t depth_gate_cost = force_full_depth ? 0 : depth_gate_.flops_per_example();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::int64_t total = depth_gate_cost;
        const int exit_depth = out.exit_depths[i];
        for (int l = 0; l < exit_depth; ++l)
            total += layers_[static_cast<std::size_t>(l)].flops_for(
                out.trace.selected[static_cast<std::size_t>(l)][i]);
        total += estimators_[static_cast<std::size_t>(exit_depth - 1)].flops_per_example();
        out.flops[i] = total;
    }
    return out;
}

namespace {

constexpr char kModelMagic[4] = {'A', 'D', 'M', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t take_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw CheckpointError("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint64_t take_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw CheckpointError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

void put_blob(std::ostream& out, const std::string& blob) {
    put_u64(out, blob.size());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

std::string take_blob(std::istream& in) {
    const std::uint64_t n = take_u64(in);
    std::string blob(static_cast<std::size_t>(n), '\0');
    in.read(blob.data(), static_cast<std::streamsize>(n));
    if (!in) throw CheckpointError("checkpoint: truncated section");
    return blob;
}

}  // namespace

void AdaEnsembleModel::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
    out.write(kModelMagic, 4);
    put_u32(out, 1);  // envelope version

    put_blob(out, config_.to_echo());

    std::ostringstream pipe_bytes;
    pipeline_.write(pipe_bytes);
    put_blob(out, pipe_bytes.str());

    TensorStore store;
    for (const auto& entry : params_.entries()) store.put(entry.name, entry.tensor);
    std::ostringstream tensor_bytes;
    store.write(tensor_bytes);
    put_blob(out, tensor_bytes.str());
    if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

AdaEnsembleModel AdaEnsembleModel::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kModelMagic, 4) != 0)
        throw CheckpointError("checkpoint: bad magic, not a model checkpoint");
    const std::uint32_t version = take_u32(in);
    if (version != 1)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));

    const std::string echo = take_blob(in);
    const std::string pipe_bytes = take_blob(in);
    const std::string tensor_bytes = take_blob(in);

    ModelConfig config = ModelConfig::parse_echo(echo);
    std::istringstream pipe_in(pipe_bytes);
    FeaturePipeline pipeline = FeaturePipeline::read(pipe_in);

    // Rebuild the structure with a throwaway seed, then overwrite every tensor.
    Rng build_rng(0);
    AdaEnsembleModel model = init(std::move(config), std::move(pipeline), build_rng);

    std::istringstream tensor_in(tensor_bytes);
    TensorStore store = TensorStore::read(tensor_in);
    if (store.entries().size() != model.params_.entries().size())
        throw CheckpointError("checkpoint: tensor count " +
                              std::to_string(store.entries().size()) + " does not match model (" +
                              std::to_string(model.params_.entries().size()) + ")");
    for (auto& entry : model.params_.entries()) {
        const NamedTensor* stored = store.find(entry.name);
        if (!stored) throw CheckpointError("checkpoint: missing tensor " + entry.name);
        if (stored->shape != entry.tensor.shape())
            throw CheckpointError("checkpoint: tensor " + entry.name + " has shape mismatch");
        Tensor t = entry.tensor;
        t.mutable_values() = stored->values;
    }
    return model;
}

void AdaEnsembleModel::reset_eval_counts() const {
    for (const auto& layer : layers_) layer.reset_eval_counts();
}

}  // namespace ada
